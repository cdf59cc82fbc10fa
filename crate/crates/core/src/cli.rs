//! Command implementations behind the `beam-moe` binary.
//!
//! Every command takes a fully resolved [`ExperimentConfig`] (file, then
//! command-line and environment overrides) and writes its outputs atomically.
//! Each writes a manifest next to its outputs listing the files it produced
//! with their SHA-256.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{self, Comparison, GatingTrace, MetricsReport};
use crate::fsutil;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::moe::{self, ModelKind, TrainingRun};
use crate::scenario::generate_dataset;

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub topk: Option<Vec<usize>>,
}

/// Loads `path` (or defaults), applies overrides, and validates the result.
pub fn resolve_config(path: Option<&Path>, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.scenario.rng_seed = s;
        cfg.model.init_seed = s;
        cfg.train.shuffle_seed = s;
        cfg.experiment.seeds = vec![s];
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = o.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(k) = &o.topk {
        cfg.experiment.ks.clone_from(k);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `<path><suffix>`, e.g. `model.ckpt` -> `model.ckpt.manifest.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn root_of(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates the configured dataset into `out`. Returns the manifest path.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    ensure_dir(root_of(out))?;
    let ds = generate_dataset(&cfg.scenario)?;
    ds.save(out)?;
    let mut m = RunManifest::new("gen-data", cfg.scenario.hash(), vec![cfg.scenario.rng_seed]);
    m.add_artifact(root_of(out), "dataset", out)?;
    m.add_timing("gen-data", start.elapsed().as_secs_f64());
    let mpath = sibling(out, ".manifest.json");
    m.write(&mpath)?;
    Ok(mpath)
}

/// Trains `kind` on `data`, or continues the checkpoint `resume` up to the
/// configured epoch count. Writes the checkpoint, its summary, a learning
/// curve and a manifest.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    data: &Path,
    kind: Option<ModelKind>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<Checkpoint> {
    let start = Instant::now();
    let ds = Dataset::load(data)?;
    let dataset_hash = Some(ds.header().config_hash.clone());
    let (run, init_seed) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if let Some(k) = kind {
                if k != ck.model().kind() {
                    return Err(Error::config(
                        "model",
                        format!("checkpoint holds a {} model, not {k}", ck.model().kind()),
                    ));
                }
            }
            (ck.run, ck.init_seed)
        }
        None => {
            let kind = kind.ok_or_else(|| Error::config("model", "required unless resuming"))?;
            let model = moe::build_baseline(
                kind,
                ds.modality_dims(),
                ds.header().num_beams,
                &cfg.model,
            )?;
            (TrainingRun::new(model), cfg.model.init_seed)
        }
    };
    run.model.check_compatible(&ds)?;
    let run = moe::continue_training(run, &ds, &cfg.train)?;
    ensure_dir(root_of(out))?;
    let ck = Checkpoint::new(run, init_seed, dataset_hash);
    ck.save(out)?;
    let history = sibling(out, ".history.tsv");
    fsutil::write_atomic(&history, eval::learning_curve_tsv(&ck.run.history).as_bytes())?;
    let root = root_of(out);
    let mut m = RunManifest::new("train", cfg.hash(), vec![init_seed]);
    m.add_artifact(root, "checkpoint", out)?;
    m.add_artifact(root, "checkpoint_summary", &Checkpoint::summary_path(out))?;
    m.add_artifact(root, "history", &history)?;
    m.add_timing("train", start.elapsed().as_secs_f64());
    m.write(&sibling(out, ".manifest.json"))?;
    Ok(ck)
}

/// One record per `(method, seed, slice, metric, value)`.
pub fn report_records(report: &MetricsReport, modality_names: &[String]) -> String {
    let mut out = String::new();
    for (slice, metric, value) in report.metrics(modality_names) {
        let rec = serde_json::json!({
            "method": report.method,
            "seed": report.seed,
            "slice": slice,
            "metric": metric,
            "value": value,
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

pub fn report_table(report: &MetricsReport, modality_names: &[String]) -> String {
    let mut out = format!(
        "method {}  seed {}  split {}\n{:<6} {:<12} {:>10}\n",
        report.method,
        report.seed,
        report.split.as_str(),
        "slice",
        "metric",
        "value"
    );
    for (slice, metric, value) in report.metrics(modality_names) {
        out.push_str(&format!("{:<6} {:<12} {:>10.4}\n", slice.as_str(), metric, value));
    }
    out
}

/// Evaluates a checkpoint; writes `metrics.jsonl` and `metrics.txt` into
/// `out_dir`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(data)?;
    let report = eval::evaluate(ck.model(), &ds, split, &cfg.experiment.ks, ck.init_seed)?;
    ensure_dir(out_dir)?;
    let names = &ds.header().modality_names;
    let jsonl = out_dir.join("metrics.jsonl");
    let table = out_dir.join("metrics.txt");
    fsutil::write_atomic(&jsonl, report_records(&report, names).as_bytes())?;
    fsutil::write_atomic(&table, report_table(&report, names).as_bytes())?;
    let mut m = RunManifest::new("eval", cfg.hash(), vec![ck.init_seed]);
    m.add_artifact(out_dir, "metrics_records", &jsonl)?;
    m.add_artifact(out_dir, "metrics_table", &table)?;
    m.add_timing("eval", start.elapsed().as_secs_f64());
    m.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(report)
}

/// Runs the full method comparison. Layout under `out_dir`:
///
/// ```text
/// config.toml            resolved config
/// report.jsonl           per-run and aggregate records
/// report.txt             aggregate table
/// runs/<method>_seed<s>.ckpt (+ .txt, .history.tsv)
/// manifest.json
/// ```
pub fn cmd_compare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Comparison> {
    let start = Instant::now();
    let runs_dir = out_dir.join("runs");
    ensure_dir(&runs_dir)?;
    let mut produced: Vec<(String, PathBuf)> = Vec::new();
    let cmp = eval::compare_methods_with(cfg, |method, seed, ds, run| {
        let base = runs_dir.join(format!("{}_seed{seed}.ckpt", method.short_name()));
        let ck = Checkpoint::new(run.clone(), seed, Some(ds.header().config_hash.clone()));
        ck.save(&base)?;
        let history = sibling(&base, ".history.tsv");
        fsutil::write_atomic(&history, eval::learning_curve_tsv(&run.history).as_bytes())?;
        produced.push(("checkpoint".into(), base.clone()));
        produced.push(("checkpoint_summary".into(), Checkpoint::summary_path(&base)));
        produced.push(("history".into(), history));
        Ok(())
    })?;
    let config_path = out_dir.join("config.toml");
    let jsonl = out_dir.join("report.jsonl");
    let table = out_dir.join("report.txt");
    fsutil::write_atomic(&config_path, cfg.to_toml_string().as_bytes())?;
    fsutil::write_atomic(&jsonl, cmp.records_jsonl().as_bytes())?;
    fsutil::write_atomic(&table, cmp.table().as_bytes())?;
    let mut m = RunManifest::new("compare", cfg.hash(), cfg.experiment.seeds.clone());
    m.add_artifact(out_dir, "config", &config_path)?;
    m.add_artifact(out_dir, "report_records", &jsonl)?;
    m.add_artifact(out_dir, "report_table", &table)?;
    for (role, p) in &produced {
        m.add_artifact(out_dir, role, p)?;
    }
    m.add_timing("compare", start.elapsed().as_secs_f64());
    m.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(cmp)
}

/// Gating trace as tab-separated text: a header, one row per sample, then
/// `# summary` lines with per-regime means.
pub fn gating_trace_tsv(trace: &GatingTrace, modality_names: &[String]) -> String {
    let mut out = String::from("sample_id\tregime");
    for n in modality_names {
        out.push_str(&format!("\tw_{n}"));
    }
    out.push('\n');
    for (id, regime, w) in &trace.rows {
        out.push_str(&format!("{id}\t{}", regime.as_str()));
        for v in w {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    for r in &trace.summary {
        out.push_str(&format!("# summary\t{}\tcount={}", r.regime.as_str(), r.count));
        for v in &r.mean_weights {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    out
}

/// Writes the per-sample fusion weights of a mixture checkpoint to `out`.
pub fn cmd_inspect_gating(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    out: &Path,
) -> Result<GatingTrace> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(data)?;
    let trace = eval::gating_trace(ck.model(), &ds, split)?;
    ensure_dir(root_of(out))?;
    let names: Vec<String> = ck
        .model()
        .active_modalities()
        .iter()
        .map(|&d| ds.header().modality_names.get(d).cloned().unwrap_or_else(|| d.to_string()))
        .collect();
    fsutil::write_atomic(out, gating_trace_tsv(&trace, &names).as_bytes())?;
    Ok(trace)
}

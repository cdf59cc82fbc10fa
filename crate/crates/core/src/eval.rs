//! Metrics, learning curves, gating reports and multi-seed comparisons.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::array_channel::{gain_ratio, ChannelState, Codebook};
use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::moe::{self, BeamModel, EpochRecord, ModelKind, TrainingRun};
use crate::scenario::{generate_dataset, Regime};

/// Position of `label` in the ranking of `logits`, with ties ranked by lowest
/// index first, matching the arg-max used for prediction.
fn label_rank(logits: &[f64], label: usize) -> usize {
    let target = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count()
}

/// Fraction of samples whose label is among the `k` highest logits.
pub fn topk_accuracy<L: AsRef<[f64]>>(logits: &[L], labels: &[usize], k: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::domain("top-k accuracy of an empty set"));
    }
    if logits.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit vectors for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (l, &y) in logits.iter().zip(labels) {
        let l = l.as_ref();
        if k == 0 || k > l.len() {
            return Err(Error::domain(format!("k = {k} outside [1, {}]", l.len())));
        }
        if y >= l.len() {
            return Err(Error::domain(format!("label {y} outside [0, {})", l.len())));
        }
        if label_rank(l, y) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / logits.len() as f64)
}

/// Average normalized beamforming gain of the predicted beams.
pub fn mean_gain_ratio(
    predictions: &[usize],
    channels: &[ChannelState],
    codebook: &Codebook,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::domain("mean gain ratio of an empty set"));
    }
    if predictions.len() != channels.len() {
        return Err(Error::shape("predictions and channels differ in length"));
    }
    let mut sum = 0.0;
    for (&p, h) in predictions.iter().zip(channels) {
        sum += gain_ratio(h, p, codebook)?;
    }
    Ok(sum / predictions.len() as f64)
}

/// Plot-ready rows `(epoch, train_loss, val_top1)`, verbatim from `history`.
pub fn learning_curve(history: &[EpochRecord]) -> Vec<(usize, f64, Option<f64>)> {
    history.iter().map(|r| (r.epoch, r.train_loss, r.val_top1)).collect()
}

/// Tab-separated learning curve with a header row; missing validation
/// accuracy is written as `nan`.
pub fn learning_curve_tsv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_top1\n");
    for (e, loss, val) in learning_curve(history) {
        let val = val.map_or_else(|| "nan".to_owned(), |v| v.to_string());
        writeln!(out, "{e}\t{loss}\t{val}").expect("string write");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    All,
    Day,
    Night,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::All, Slice::Day, Slice::Night];

    pub fn as_str(&self) -> &'static str {
        match self {
            Slice::All => "all",
            Slice::Day => "day",
            Slice::Night => "night",
        }
    }

    pub fn contains(&self, sample: &Sample) -> bool {
        match self {
            Slice::All => true,
            Slice::Day => sample.regime == Regime::Day,
            Slice::Night => sample.regime == Regime::Night,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub slice: Slice,
    pub count: usize,
    /// `(k, accuracy)` in ascending k.
    pub topk: Vec<(usize, f64)>,
    /// `None` when the dataset carries no scenario to rebuild channels.
    pub mean_gain_ratio: Option<f64>,
    /// Mean fusion weight per modality; mixture models only.
    pub gating_means: Option<Vec<f64>>,
}

impl SliceMetrics {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: ModelKind,
    pub seed: u64,
    pub split: Split,
    /// Non-empty slices only, in `all, day, night` order.
    pub slices: Vec<SliceMetrics>,
}

impl MetricsReport {
    pub fn slice(&self, slice: Slice) -> Option<&SliceMetrics> {
        self.slices.iter().find(|s| s.slice == slice)
    }

    /// Flattened `(slice, metric, value)` triples in a fixed order.
    pub fn metrics(&self, modality_names: &[String]) -> Vec<(Slice, String, f64)> {
        let mut out = Vec::new();
        for s in &self.slices {
            out.push((s.slice, "count".to_owned(), s.count as f64));
            for &(k, v) in &s.topk {
                out.push((s.slice, format!("top{k}"), v));
            }
            if let Some(g) = s.mean_gain_ratio {
                out.push((s.slice, "gain_ratio".to_owned(), g));
            }
            if let Some(w) = &s.gating_means {
                for (d, v) in w.iter().enumerate() {
                    let name = modality_names.get(d).cloned().unwrap_or_else(|| d.to_string());
                    out.push((s.slice, format!("w_{name}"), *v));
                }
            }
        }
        out
    }
}

fn sorted_ks(ks: &[usize]) -> Vec<usize> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// Evaluates `model` on one split of `dataset`, per slice.
pub fn evaluate(
    model: &BeamModel,
    dataset: &Dataset,
    split: Split,
    ks: &[usize],
    seed: u64,
) -> Result<MetricsReport> {
    model.check_compatible(dataset)?;
    let ks = sorted_ks(ks);
    if ks.is_empty() {
        return Err(Error::domain("no k requested"));
    }
    let codebook = match &dataset.header().scenario {
        Some(sc) => Some(sc.codebook()?),
        None => None,
    };
    let indices = dataset.indices(split);
    let mut logits = Vec::with_capacity(indices.len());
    let mut beams = Vec::with_capacity(indices.len());
    let mut weights = Vec::with_capacity(indices.len());
    let mut channels = Vec::with_capacity(indices.len());
    for &i in &indices {
        let s = &dataset.samples()[i];
        let p = model.predict(&s.modalities)?;
        logits.push(p.logits);
        beams.push(p.beam);
        weights.push(p.weights);
        if codebook.is_some() {
            channels.push(dataset.channel(s)?);
        }
    }
    let mut slices = Vec::new();
    for slice in Slice::ALL {
        let members: Vec<usize> = indices
            .iter()
            .enumerate()
            .filter(|&(_, &i)| slice.contains(&dataset.samples()[i]))
            .map(|(j, _)| j)
            .collect();
        if members.is_empty() {
            continue;
        }
        let sl: Vec<&[f64]> = members.iter().map(|&j| logits[j].as_slice()).collect();
        let labels: Vec<usize> = members
            .iter()
            .map(|&j| dataset.samples()[indices[j]].label)
            .collect();
        let topk = ks
            .iter()
            .map(|&k| Ok((k, topk_accuracy(&sl, &labels, k)?)))
            .collect::<Result<Vec<_>>>()?;
        let mean_gain = match &codebook {
            Some(cb) => {
                let preds: Vec<usize> = members.iter().map(|&j| beams[j]).collect();
                let hs: Vec<ChannelState> = members.iter().map(|&j| channels[j].clone()).collect();
                Some(mean_gain_ratio(&preds, &hs, cb)?)
            }
            None => None,
        };
        let gating_means = if model.kind() == ModelKind::Moe {
            let d = model.active_modalities().len();
            let mut acc = vec![0.0; d];
            for &j in &members {
                let w = weights[j].as_ref().expect("mixture prediction carries weights");
                for (a, v) in acc.iter_mut().zip(w.as_slice()) {
                    *a += v;
                }
            }
            Some(acc.into_iter().map(|a| a / members.len() as f64).collect())
        } else {
            None
        };
        slices.push(SliceMetrics {
            slice,
            count: members.len(),
            topk,
            mean_gain_ratio: mean_gain,
            gating_means,
        });
    }
    Ok(MetricsReport {
        method: model.kind(),
        seed,
        split,
        slices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeWeights {
    pub regime: Regime,
    pub count: usize,
    /// Mean fusion weight per modality; empty when `count` is zero.
    pub mean_weights: Vec<f64>,
}

/// Per-sample fusion weights over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingTrace {
    /// `(sample_id, regime, weights)` in dataset order.
    pub rows: Vec<(u64, Regime, Vec<f64>)>,
    pub summary: Vec<RegimeWeights>,
}

/// Fusion weights of a mixture model on every sample of `split`.
pub fn gating_trace(model: &BeamModel, dataset: &Dataset, split: Split) -> Result<GatingTrace> {
    if model.kind() != ModelKind::Moe {
        return Err(Error::domain(format!(
            "gating report needs a mixture model, got {}",
            model.kind()
        )));
    }
    model.check_compatible(dataset)?;
    let mut rows = Vec::new();
    for i in dataset.indices(split) {
        let s = &dataset.samples()[i];
        let w = model.gating_forward(&s.modalities)?;
        rows.push((s.sample_id, s.regime, w.as_slice().to_vec()));
    }
    let d = model.active_modalities().len();
    let summary = Regime::ALL
        .iter()
        .map(|&regime| {
            let mut acc = vec![0.0; d];
            let mut count = 0usize;
            for (_, r, w) in &rows {
                if *r == regime {
                    count += 1;
                    for (a, v) in acc.iter_mut().zip(w) {
                        *a += v;
                    }
                }
            }
            let mean_weights = if count == 0 {
                Vec::new()
            } else {
                acc.into_iter().map(|a| a / count as f64).collect()
            };
            RegimeWeights {
                regime,
                count,
                mean_weights,
            }
        })
        .collect();
    Ok(GatingTrace { rows, summary })
}

/// Per-regime mean fusion weights over the test split.
pub fn gating_report(model: &BeamModel, dataset: &Dataset) -> Result<Vec<RegimeWeights>> {
    Ok(gating_trace(model, dataset, Split::Test)?.summary)
}

/// Outcome of one `(method, seed)` training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: ModelKind,
    pub seed: u64,
    /// Error message when the run failed; other runs continue.
    pub outcome: std::result::Result<MetricsReport, String>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: ModelKind,
    pub slice: Slice,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub modality_names: Vec<String>,
    pub runs: Vec<RunResult>,
    pub aggregate: Vec<AggregateRow>,
}

impl Comparison {
    pub fn mean(&self, method: ModelKind, slice: Slice, metric: &str) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|r| r.method == method && r.slice == slice && r.metric == metric)
            .map(|r| r.mean)
    }

    /// One JSON object per `(method, seed, slice, metric, value)`, then one per
    /// aggregate row with `seed` set to `"mean"` and `"std"`.
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for run in &self.runs {
            let Ok(report) = &run.outcome else { continue };
            for (slice, metric, value) in report.metrics(&self.modality_names) {
                let rec = serde_json::json!({
                    "method": run.method,
                    "seed": run.seed,
                    "slice": slice,
                    "metric": metric,
                    "value": value,
                });
                out.push_str(&rec.to_string());
                out.push('\n');
            }
        }
        for row in &self.aggregate {
            for (tag, value) in [("mean", row.mean), ("std", row.std)] {
                let rec = serde_json::json!({
                    "method": row.method,
                    "seed": tag,
                    "slice": row.slice,
                    "metric": row.metric,
                    "value": value,
                    "n": row.n,
                });
                out.push_str(&rec.to_string());
                out.push('\n');
            }
        }
        out
    }

    /// Human-readable table of aggregate means and stds, plus failures.
    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<10} {:<6} {:<12} {:>10} {:>10} {:>3}",
            "method", "slice", "metric", "mean", "std", "n"
        )
        .expect("string write");
        for r in &self.aggregate {
            if r.metric == "count" {
                continue;
            }
            writeln!(
                out,
                "{:<10} {:<6} {:<12} {:>10.4} {:>10.4} {:>3}",
                r.method.short_name(),
                r.slice.as_str(),
                r.metric,
                r.mean,
                r.std,
                r.n
            )
            .expect("string write");
        }
        for run in &self.runs {
            if let Err(e) = &run.outcome {
                writeln!(out, "FAILED {} seed {}: {e}", run.method, run.seed).expect("string write");
            }
        }
        out
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(methods: &[ModelKind], runs: &[RunResult], names: &[String]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for &method in methods {
        let reports: Vec<&MetricsReport> = runs
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        let Some(first) = reports.first() else { continue };
        for (slice, metric, _) in first.metrics(names) {
            let values: Vec<f64> = reports
                .iter()
                .filter_map(|rep| {
                    rep.metrics(names)
                        .into_iter()
                        .find(|(s, m, _)| *s == slice && *m == metric)
                        .map(|(_, _, v)| v)
                })
                .collect();
            let (mean, std) = mean_std(&values);
            rows.push(AggregateRow {
                method,
                slice,
                metric,
                mean,
                std,
                n: values.len(),
            });
        }
    }
    rows
}

/// Trains and evaluates every configured method on every seed.
///
/// For each seed the dataset is generated once and shared by all methods;
/// model initialization and shuffling are keyed by the same seed. Test-split
/// metrics are reported per slice. `on_run` sees each trained model, for
/// example to persist it; its errors mark that run failed.
pub fn compare_methods_with<F>(exp: &ExperimentConfig, mut on_run: F) -> Result<Comparison>
where
    F: FnMut(ModelKind, u64, &Dataset, &TrainingRun) -> Result<()>,
{
    exp.validate()?;
    let mut runs = Vec::new();
    let mut names = Vec::new();
    for &seed in &exp.experiment.seeds {
        let (scenario, model_cfg, train_cfg) = exp.for_seed(seed);
        let dataset = generate_dataset(&scenario)?;
        names.clone_from(&dataset.header().modality_names);
        for &method in &exp.experiment.methods {
            let mut history = Vec::new();
            let outcome = (|| {
                let model = moe::build_baseline(
                    method,
                    dataset.modality_dims(),
                    dataset.header().num_beams,
                    &model_cfg,
                )?;
                let run = moe::train(model, &dataset, &train_cfg)?;
                history.clone_from(&run.history);
                on_run(method, seed, &dataset, &run)?;
                evaluate(&run.model, &dataset, Split::Test, &exp.experiment.ks, seed)
            })()
            .map_err(|e| e.to_string());
            runs.push(RunResult {
                method,
                seed,
                outcome,
                history,
            });
        }
    }
    let aggregate = aggregate(&exp.experiment.methods, &runs, &names);
    Ok(Comparison {
        modality_names: names,
        runs,
        aggregate,
    })
}

pub fn compare_methods(exp: &ExperimentConfig) -> Result<Comparison> {
    compare_methods_with(exp, |_, _, _, _| Ok(()))
}

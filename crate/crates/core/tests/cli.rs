use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use beam_moe::checkpoint::Checkpoint;
use beam_moe::dataset::{Dataset, Split};
use beam_moe::eval;
use beam_moe::manifest;

const SMALL: &str = r#"
[scenario]
num_samples = 240
rng_seed = 5

[train]
epochs = 2
batch_size = 8
learning_rate = 0.002

[experiment]
seeds = [5]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_beam-moe"));
    for var in [
        "BEAMMOE_CONFIG",
        "BEAMMOE_SEED",
        "BEAMMOE_EPOCHS",
        "BEAMMOE_LR",
        "BEAMMOE_BATCH_SIZE",
        "BEAMMOE_TOPK",
        "BEAMMOE_MODEL",
    ] {
        c.env_remove(var);
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: Output) -> Output {
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).display().to_string()
    }

    fn gen(&self, name: &str) -> String {
        ok(run(&["gen-data", "--config", &self.s("c.toml"), "--out", &self.s(name)]));
        self.s(name)
    }

    fn train(&self, data: &str, model: &str, out: &str, extra: &[&str]) -> Output {
        let cfg = self.s("c.toml");
        let out = self.s(out);
        let mut args = vec!["train", "--config", &cfg, "--data", data, "--model", model, "--out", &out];
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_manifested() {
    let env = Env::new();
    let a = env.gen("a.jsonl");
    let b = env.gen("b.jsonl");
    assert_eq!(read(Path::new(&a)), read(Path::new(&b)));
    let problems = manifest::verify(&env.p("a.jsonl.manifest.json")).unwrap();
    assert!(problems.is_empty(), "{problems:?}");
    let ds = Dataset::load(Path::new(&a)).unwrap();
    assert_eq!(ds.len(), 240);
}

#[test]
fn bad_config_and_bad_arguments_exit_2() {
    let env = Env::new();
    std::fs::write(env.p("bad.toml"), "[scenario]\nnum_beams = \"many\"\n").unwrap();
    let out = run(&["gen-data", "--config", &env.s("bad.toml"), "--out", &env.s("x.jsonl")]);
    assert_eq!(code(&out), 2);
    std::fs::write(env.p("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = run(&["print-config", "--config", &env.s("typo.toml")]);
    assert_eq!(code(&out), 2);
    let data = env.gen("d.jsonl");
    let out = env.train(&data, "resnet", "m.ckpt", &[]);
    assert_eq!(code(&out), 2);
    assert!(!env.p("m.ckpt").exists());
}

#[test]
fn missing_input_exits_3() {
    let env = Env::new();
    let out = env.train(&env.s("nope.jsonl"), "moe", "m.ckpt", &[]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_writes_checkpoint_summary_curve_and_manifest() {
    let env = Env::new();
    let data = env.gen("d.jsonl");
    ok(env.train(&data, "moe", "m.ckpt", &[]));
    let ck = Checkpoint::load(&env.p("m.ckpt")).unwrap();
    assert_eq!(ck.run.epochs_done(), 2);
    assert!(env.p("m.ckpt.txt").exists());
    let curve = std::fs::read_to_string(env.p("m.ckpt.history.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    assert!(curve.starts_with("epoch\ttrain_loss\tval_top1"));
    assert!(manifest::verify(&env.p("m.ckpt.manifest.json")).unwrap().is_empty());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let env = Env::new();
    let data = env.gen("d.jsonl");
    ok(env.train(&data, "concat", "full.ckpt", &["--epochs", "4"]));
    ok(env.train(&data, "concat", "half.ckpt", &["--epochs", "2"]));
    let half = env.s("half.ckpt");
    ok(env.train(&data, "concat", "rest.ckpt", &["--epochs", "4", "--resume", &half]));
    assert_eq!(read(&env.p("full.ckpt")), read(&env.p("rest.ckpt")));

    let out = env.train(&data, "moe", "wrong.ckpt", &["--epochs", "4", "--resume", &half]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_reports_requested_k_and_rejects_bad_inputs() {
    let env = Env::new();
    let data = env.gen("d.jsonl");
    ok(env.train(&data, "position", "m.ckpt", &[]));
    let cfg = env.s("c.toml");
    let ckpt = env.s("m.ckpt");
    let ev = env.s("ev");
    ok(run(&["eval", "--config", &cfg, "--checkpoint", &ckpt, "--data", &data, "--out", &ev, "--topk", "1,2,5"]));
    let records = std::fs::read_to_string(env.p("ev/metrics.jsonl")).unwrap();
    let mut metrics: Vec<String> = records
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["slice"] == "all")
        .map(|v| v["metric"].as_str().unwrap().to_owned())
        .collect();
    metrics.sort();
    assert_eq!(metrics, ["count", "gain_ratio", "top1", "top2", "top5"]);
    assert!(manifest::verify(&env.p("ev/manifest.json")).unwrap().is_empty());

    let mut bytes = read(&env.p("m.ckpt"));
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    std::fs::write(env.p("bad.ckpt"), bytes).unwrap();
    let out = run(&["eval", "--checkpoint", &env.s("bad.ckpt"), "--data", &data, "--out", &ev]);
    assert_eq!(code(&out), 3);

    std::fs::write(
        env.p("grid.toml"),
        "[scenario]\nnum_samples = 60\nvisual_grid_size = 4\n",
    )
    .unwrap();
    let other = env.s("other.jsonl");
    ok(run(&["gen-data", "--config", &env.s("grid.toml"), "--out", &other]));
    let vis = env.s("vis.ckpt");
    ok(env.train(&data, "vision", "vis.ckpt", &[]));
    let out = run(&["eval", "--checkpoint", &vis, "--data", &other, "--out", &ev]);
    assert_eq!(code(&out), 2);
}

#[test]
fn compare_writes_reports_and_is_repeatable() {
    let env = Env::new();
    let cfg = env.s("c.toml");
    ok(run(&["compare", "--config", &cfg, "--out", &env.s("a")]));
    ok(run(&["compare", "--config", &cfg, "--out", &env.s("b")]));
    for f in ["report.jsonl", "report.txt", "config.toml"] {
        assert_eq!(read(&env.p("a").join(f)), read(&env.p("b").join(f)), "{f}");
    }
    let runs: Vec<_> = std::fs::read_dir(env.p("a/runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    assert_eq!(runs.len(), 4, "{runs:?}");
    assert!(manifest::verify(&env.p("a/manifest.json")).unwrap().is_empty());
}

#[test]
fn inspect_gating_traces_every_test_sample() {
    let env = Env::new();
    let data = env.gen("d.jsonl");
    ok(env.train(&data, "moe", "m.ckpt", &[]));
    let out = env.s("g.tsv");
    ok(run(&["inspect-gating", "--checkpoint", &env.s("m.ckpt"), "--data", &data, "--out", &out]));
    let text = std::fs::read_to_string(&out).unwrap();
    let ds = Dataset::load(Path::new(&data)).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .collect();
    assert_eq!(rows.len(), ds.indices(Split::Test).len());
    for r in &rows {
        let w: f64 = r.split('\t').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((w - 1.0).abs() < 1e-12);
    }
    let ck = Checkpoint::load(&env.p("m.ckpt")).unwrap();
    let expected = eval::gating_report(ck.model(), &ds).unwrap();
    let summaries: Vec<&str> = text.lines().filter(|l| l.starts_with("# summary")).collect();
    assert_eq!(summaries.len(), expected.len());
    for (line, reg) in summaries.iter().zip(&expected) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields[1], reg.regime.as_str());
        let means: Vec<f64> = fields[3..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(means, reg.mean_weights);
    }

    ok(env.train(&data, "concat", "c.ckpt", &[]));
    let res = run(&["inspect-gating", "--checkpoint", &env.s("c.ckpt"), "--data", &data, "--out", &out]);
    assert_eq!(code(&res), 2);
}

#[test]
fn print_config_round_trips_and_honours_env_overrides() {
    let env = Env::new();
    let out = ok(run(&["print-config", "--config", &env.s("c.toml")]));
    std::fs::write(env.p("again.toml"), &out.stdout).unwrap();
    let again = ok(run(&["print-config", "--config", &env.s("again.toml")]));
    assert_eq!(out.stdout, again.stdout);

    let with_env = bin()
        .args(["print-config"])
        .env("BEAMMOE_CONFIG", env.p("c.toml"))
        .env("BEAMMOE_EPOCHS", "7")
        .env("BEAMMOE_SEED", "9")
        .output()
        .unwrap();
    let text = String::from_utf8(ok(with_env).stdout).unwrap();
    let cfg = beam_moe::config::ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.train.epochs, 7);
    assert_eq!(cfg.scenario.rng_seed, 9);
    assert_eq!(cfg.experiment.seeds, vec![9]);
    assert_eq!(cfg.scenario.num_samples, 240);

    // A flag beats the environment.
    let flag = bin()
        .args(["print-config", "--epochs", "3"])
        .env("BEAMMOE_EPOCHS", "7")
        .output()
        .unwrap();
    let cfg = beam_moe::config::ExperimentConfig::from_toml_str(&String::from_utf8(ok(flag).stdout).unwrap()).unwrap();
    assert_eq!(cfg.train.epochs, 3);
}

#[test]
fn diverging_training_exits_4() {
    let env = Env::new();
    let data = env.gen("d.jsonl");
    let out = env.train(&data, "position", "m.ckpt", &["--lr", "1e12"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    assert!(!env.p("m.ckpt").exists());
}

//! Command-line entry point. Exit codes: 0 success, 2 usage or config error,
//! 3 IO or file-format error, 4 numeric failure during training.

use std::path::PathBuf;
use std::process::ExitCode;

use beam_moe::cli::{self, Overrides};
use beam_moe::dataset::Split;
use beam_moe::eval::Slice;
use beam_moe::moe::ModelKind;
use beam_moe::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "beam-moe", version, about = "Multimodal mixture-of-experts beam prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; defaults are used for anything it omits.
    #[arg(long, env = "BEAMMOE_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, env = "BEAMMOE_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "BEAMMOE_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "BEAMMOE_LR")]
    lr: Option<f64>,
    #[arg(long, env = "BEAMMOE_BATCH_SIZE")]
    batch_size: Option<usize>,
    /// Comma-separated top-k list, e.g. `1,2`.
    #[arg(long, env = "BEAMMOE_TOPK", value_delimiter = ',')]
    topk: Option<Vec<usize>>,
}

impl Common {
    fn resolve(&self) -> Result<beam_moe::config::ExperimentConfig> {
        cli::resolve_config(
            self.config.as_deref(),
            &Overrides {
                seed: self.seed,
                epochs: self.epochs,
                learning_rate: self.lr,
                batch_size: self.batch_size,
                topk: self.topk.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model, or resume a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// moe, concat, vision or position.
        #[arg(long, env = "BEAMMOE_MODEL")]
        model: Option<ModelKind>,
        #[arg(long)]
        out: PathBuf,
        /// Continue training this checkpoint up to the configured epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate all methods over all seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-sample fusion weights of a mixture checkpoint.
    InspectGating {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved config (all defaults when no file is given).
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.resolve()?;
            for w in cfg.scenario.validate()? {
                eprintln!("warning: {w}");
            }
            let manifest = cli::cmd_gen_data(&cfg, &out)?;
            println!("wrote {} ({})", out.display(), manifest.display());
        }
        Command::Train {
            common,
            data,
            model,
            out,
            resume,
        } => {
            let cfg = common.resolve()?;
            let ck = cli::cmd_train(&cfg, &data, model, &out, resume.as_deref())?;
            if let Some(last) = ck.run.history.last() {
                let val = last.val_top1.map_or("n/a".to_owned(), |v| format!("{v:.4}"));
                println!(
                    "{} epoch {}: train_loss {:.4} val_top1 {val}",
                    ck.model().kind(),
                    last.epoch,
                    last.train_loss
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = common.resolve()?;
            let report = cli::cmd_eval(&cfg, &checkpoint, &data, split, &out)?;
            let names = ["position".to_owned(), "visual".to_owned()];
            print!("{}", cli::report_table(&report, &names));
        }
        Command::Compare { common, out } => {
            let cfg = common.resolve()?;
            let cmp = cli::cmd_compare(&cfg, &out)?;
            print!("{}", cmp.table());
            if let (Some(m), Some(c)) = (
                cmp.mean(ModelKind::Moe, Slice::All, "top1"),
                cmp.mean(ModelKind::ConcatFusion, Slice::All, "top1"),
            ) {
                println!("moe top1 {m:.4} vs concat {c:.4}");
            }
        }
        Command::InspectGating {
            checkpoint,
            data,
            split,
            out,
        } => {
            let trace = cli::cmd_inspect_gating(&checkpoint, &data, split, &out)?;
            for r in &trace.summary {
                let w: Vec<String> = r.mean_weights.iter().map(|v| format!("{v:.4}")).collect();
                println!("{:<5} n={:<5} mean weights [{}]", r.regime.as_str(), r.count, w.join(", "));
            }
        }
        Command::PrintConfig { common } => {
            print!("{}", common.resolve()?.to_toml_string());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let beam_moe::Error::NonFiniteLoss { epoch, sample_id, value } = &e {
                eprintln!("diagnostics: epoch={epoch} sample_id={sample_id} loss={value}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ltclip::checkpoint::Checkpoint;
use ltclip::config::{Mode, RunConfig};
use ltclip::data::{Profile, SynthSpec};
use ltclip::dataset_file::{ingest, write_dataset};
use ltclip::encoder::PromptSpec;
use ltclip::eval::evaluate;
use ltclip::report;
use ltclip::train;

const DEFAULT_CHECKPOINT: &str = "checkpoint.ltck";
const DEFAULT_LOG: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(name = "ltclip", version, about = "Two-phase contrastive training for long-tailed classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Exp,
    Pareto,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset file.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        n_max: u64,
        /// Imbalance ratio (exp).
        #[arg(long, default_value_t = 40.0)]
        rho: f64,
        /// Power (pareto).
        #[arg(long, default_value_t = 6.0)]
        alpha: f64,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.35)]
        sigma: f64,
        #[arg(long, default_value_t = 50)]
        test_per_class: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per the config; writes a checkpoint and a JSON-lines log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file; prints a metrics record.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Override the stored residual factor.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        template_id: usize,
    },
    /// Train Phase A once, then Phase B per residual factor.
    SweepLambda {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated; defaults to 0, 0.1, ..., 1.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
    },
    /// Run the Cartesian product of ablation axes, e.g.
    /// `placement,sampler=square_root|mix_balanced`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "")]
        axes: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            kind,
            classes,
            n_max,
            rho,
            alpha,
            dim,
            seed,
            sigma,
            test_per_class,
            out,
        } => {
            let spec = SynthSpec {
                profile: match kind {
                    Kind::Exp => Profile::Exponential,
                    Kind::Pareto => Profile::Pareto,
                },
                classes,
                n_max,
                rho,
                alpha,
                dim,
                sigma,
                test_per_class,
                seed,
            };
            let ds = spec.generate()?;
            write_dataset(&out, &ds).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "train": ds.num_train(),
                    "test": ds.num_test(),
                    "class_counts": ds.class_counts(),
                })
            );
        }
        Command::Train {
            config,
            mode,
            seed,
            checkpoint,
            log,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let out = train::run(&cfg)?;
            let ck_path = checkpoint
                .or(cfg.output.checkpoint.clone())
                .unwrap_or_else(|| DEFAULT_CHECKPOINT.into());
            let log_path = log.or(cfg.output.log.clone()).unwrap_or_else(|| DEFAULT_LOG.into());
            out.checkpoint()
                .save(&ck_path)
                .with_context(|| format!("writing {}", ck_path.display()))?;
            fs::write(&log_path, out.log.to_jsonl()).with_context(|| format!("writing {}", log_path.display()))?;
            println!("{}", serde_json::to_string(&out.metrics)?);
        }
        Command::Eval {
            checkpoint,
            data,
            lambda,
            tau,
            template_id,
        } => {
            let mut ck = Checkpoint::load(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let ds = ingest(&data).with_context(|| format!("reading {}", data.display()))?;
            if let Some(l) = lambda {
                match ck.adapter.as_mut() {
                    Some(a) => a.set_lambda(l)?,
                    None => bail!("--lambda given but the checkpoint has no adapter"),
                }
            }
            let m = evaluate(&ck.model, ck.adapter.as_ref(), &ds, tau, PromptSpec { template_id })?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::SweepLambda {
            config,
            values,
            seed,
            format,
        } => {
            let cfg = load_config(&config, seed)?;
            let values = values.unwrap_or_else(|| report::lambda_grid(11));
            let rep = report::sweep_lambda(&cfg, &values)?;
            match format {
                Format::Jsonl => print!("{}", report::to_jsonl(&rep.rows)),
                Format::Table => print!("{}", report::sweep_table(&rep)),
            }
        }
        Command::Ablate {
            config,
            axes,
            seed,
            format,
        } => {
            let cfg = load_config(&config, seed)?;
            let rows = report::ablation_grid(&cfg, &report::parse_axes(&axes)?)?;
            match format {
                Format::Jsonl => print!("{}", report::to_jsonl(&rows)),
                Format::Table => print!("{}", report::grid_table(&rows)),
            }
        }
    }
    Ok(())
}

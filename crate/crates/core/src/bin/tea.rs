use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tea::config::RunConfig;
use tea::data::{generate_synthetic_dataset, SyntheticConfig};
use tea::metrics::EvalReport;
use tea::trainer::{fit, load_model, load_training_data, sweep, validate};

#[derive(Parser)]
#[command(name = "tea", version, about = "Temporal-adaptive segmentation of satellite image time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phenology corpus.
    GenerateData {
        /// Generator settings; the desk-scale defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and keep the checkpoint with the best validation LDIoU.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Prefix-crop evaluation at a ladder of ratios.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Corpus manifest; the one recorded in the checkpoint when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sliding-window evaluation over start × length.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a saved evaluation report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, conflicts_with = "table")]
        csv: bool,
        #[arg(long)]
        table: bool,
        #[arg(long, default_value = "model")]
        label: String,
    },
}

fn emit(report: &EvalReport, out: Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            report.save_json(&path)?;
            eprintln!("wrote {}", path.display());
        }
        None => println!("{}", report.to_json()?),
    }
    Ok(())
}

fn data_config(checkpoint_config: &RunConfig, manifest: Option<PathBuf>) -> RunConfig {
    let mut cfg = checkpoint_config.clone();
    if let Some(m) = manifest {
        cfg.data.manifest = m;
    }
    cfg
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenerateData { config, out, seed } => {
            let cfg = match config {
                Some(path) => SyntheticConfig::load(&path)?,
                None => SyntheticConfig::desk_default(),
            };
            let manifest = generate_synthetic_dataset(&cfg, &out, seed)?;
            eprintln!(
                "wrote {} samples ({} classes) to {}",
                cfg.n_samples,
                manifest.num_classes,
                out.display()
            );
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let outcome = fit(&cfg)?;
            match outcome.best_ldiou {
                Some(ld) => eprintln!("best validation LDIoU {ld:.4}"),
                None => eprintln!("no training steps were run"),
            }
            println!("{}", outcome.best_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            ratios,
            split,
            manifest,
            out,
        } => {
            let (model, ckpt) = load_model(&checkpoint)?;
            let cfg = data_config(&ckpt.config, manifest);
            let (_, splits) = load_training_data(&cfg)?;
            let ratios = ratios.unwrap_or_else(|| cfg.eval.ratios.clone());
            let report = validate(&model, splits.split(&split)?, &ratios, cfg.train.eval_batch_size)?;
            emit(&report, out)?;
        }
        Command::Sweep {
            checkpoint,
            lengths,
            step,
            split,
            manifest,
            out,
        } => {
            if lengths.is_empty() {
                bail!("--lengths needs at least one value");
            }
            let (model, ckpt) = load_model(&checkpoint)?;
            let cfg = data_config(&ckpt.config, manifest);
            let (_, splits) = load_training_data(&cfg)?;
            let samples = splits.split(&split)?;
            let cells = sweep(&model, samples, &lengths, step, cfg.train.eval_batch_size)?;
            let mut report = EvalReport::from_per_ratio(vec![1.0], vec![full_length(&cells, samples, &model, &cfg)?])?;
            report.sweep = cells;
            emit(&report, out)?;
        }
        Command::Report {
            input,
            csv,
            table: _,
            label,
        } => {
            let report = EvalReport::load_json(&input)?;
            if csv {
                print!("{}", report.to_csv()?);
            } else {
                print!("{}", report.render_table(&label));
            }
        }
    }
    Ok(())
}

/// Full-sequence mIoU, reused from the sweep when it already covers it.
fn full_length(
    cells: &[tea::metrics::SweepCell],
    samples: &[tea::data::SitsSample],
    model: &tea::model::TeaModel,
    cfg: &RunConfig,
) -> Result<f64> {
    if let Some(c) = cells.iter().find(|c| c.length_ratio == 1.0) {
        return Ok(c.miou);
    }
    Ok(validate(model, samples, &[1.0], cfg.train.eval_batch_size)?.per_ratio_miou[0])
}

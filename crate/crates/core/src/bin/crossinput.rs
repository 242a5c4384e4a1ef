//! Command-line front end: simulate corpora, train, track, evaluate, plot.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use crossinput::cli::{self, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "crossinput",
    version,
    about = "Self-supervised multi-object tracking"
)]
struct Args {
    /// JSON object of flat `section.key` values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the simulator, trainer and inference.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key, e.g. `--set train.max_steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Iou,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of `seq_XXXX/{det,gt}.txt`.
    Simulate { out_dir: PathBuf },
    /// Train on the detections of a corpus directory.
    Train {
        corpus_dir: PathBuf,
        checkpoint: PathBuf,
        /// Corpus used for the held-out loss; defaults to windows of the training corpus.
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Track one detection file.
    Track {
        /// Checkpoint path (ignored with `--baseline`).
        checkpoint: PathBuf,
        detections: PathBuf,
        result: PathBuf,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Score a result file against ground truth.
    Evaluate {
        result: PathBuf,
        ground_truth: PathBuf,
        report: PathBuf,
    },
    /// Draw predicted and ground-truth trajectories as SVG.
    Plot {
        result: PathBuf,
        ground_truth: PathBuf,
        svg: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = RunConfig::load(args.config.as_deref(), args.seed, &args.overrides)?;
    match args.command {
        Command::Simulate { out_dir } => {
            let n = cli::simulate(&config, &out_dir)?;
            println!("wrote {n} sequences to {}", out_dir.display());
        }
        Command::Train {
            corpus_dir,
            checkpoint,
            heldout,
        } => {
            let trainer = cli::train(&config, &corpus_dir, &checkpoint, heldout.as_deref())
                .with_context(|| format!("training on {}", corpus_dir.display()))?;
            let last = trainer.history.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "trained {} steps, final loss {last:.4}, checkpoint {}",
                trainer.step,
                checkpoint.display()
            );
        }
        Command::Track {
            checkpoint,
            detections,
            result,
            baseline,
        } => {
            let ckpt = baseline.is_none().then_some(checkpoint.as_path());
            let tracks = cli::track(&config, ckpt, &detections, &result)?;
            println!("wrote {} tracks to {}", tracks.len(), result.display());
        }
        Command::Evaluate {
            result,
            ground_truth,
            report,
        } => {
            let r = cli::evaluate(&config, &result, &ground_truth, &report)?;
            print!("{}", r.to_table());
            println!("MOTA {:.3}", r.mota());
            println!("IDF1 {:.3}", r.idf1());
        }
        Command::Plot {
            result,
            ground_truth,
            svg,
        } => {
            cli::plot(&config, &result, &ground_truth, &svg)?;
            println!("wrote {}", svg.display());
        }
    }
    Ok(())
}

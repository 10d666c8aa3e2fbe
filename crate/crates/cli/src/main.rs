//! `fewshot` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! abort during training.

use clap::{Parser, Subcommand};
use fewshot_cli::config::{parse_set, Config};
use fewshot_cli::{ablate, run_ablate, run_dump_features, run_eval, run_mi_probe, run_train};
use fewshot_core::episodes::Split;
use fewshot_core::synth::SynthSpec;
use fewshot_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fewshot", about = "Episodic few-shot learning engine")]
struct Cli {
    /// Plain key=value config file (train/ablate; eval-family commands use
    /// the checkpoint's embedded config)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Override any config key, e.g. --set episode.ways=20 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoint.ckpt, best.ckpt and metrics.csv
    Train {
        /// Continue from a checkpoint saved with the same config
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train + evaluate a grid of stream/weight configurations
    Ablate {
        /// Grid file (label | key=value ...); defaults to the stream-fusion grid
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Export embedding feature maps (first 16 channels) as PNG + CSV
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files to embed
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// MSE between MI-stream scores and same-class indicators
    MiProbe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Generate a procedural glyph dataset (class directories + splits.txt)
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        train_classes: usize,
        #[arg(long, default_value_t = 80)]
        val_classes: usize,
        #[arg(long, default_value_t = 100)]
        test_classes: usize,
        #[arg(long, default_value_t = 20)]
        images_per_class: usize,
        #[arg(long, default_value_t = 24)]
        image_size: usize,
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Data(_) | Error::Io(_) => 3,
                Error::Numeric(_) => 4,
            })
        }
    }
}

fn run(cli: Cli) -> fewshot_core::Result<()> {
    let overrides: Vec<(String, String)> = cli
        .set
        .iter()
        .map(|s| parse_set(s))
        .collect::<fewshot_core::Result<_>>()?;

    match cli.cmd {
        Cmd::Train { resume } => {
            let cfg = Config::from_sources(cli.config.as_deref(), &overrides, cli.seed)?;
            let artifacts = run_train(&cfg, &cli.out_dir, resume.as_deref())?;
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("metrics: {}", artifacts.metrics.display());
            if let (Some(best), Some(acc)) = (&artifacts.best, artifacts.best_val_acc) {
                println!("best (val acc {:.4}): {}", acc, best.display());
            }
        }
        Cmd::Eval { checkpoint, split, episodes } => {
            let split = Split::parse(&split)?;
            let report = run_eval(&checkpoint, &overrides, cli.seed, split, episodes)?;
            print!("{}", report.to_text());
        }
        Cmd::Ablate { grid } => {
            let cfg = Config::from_sources(cli.config.as_deref(), &overrides, cli.seed)?;
            let cells = match grid {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        Error::Config(format!("cannot read grid {}: {e}", path.display()))
                    })?;
                    ablate::parse_grid(&text)?
                }
                None => ablate::default_grid(),
            };
            let rows = run_ablate(&cfg, &cells, &cli.out_dir)?;
            println!("{} configurations evaluated; tables in {}", rows.len(), cli.out_dir.display());
        }
        Cmd::DumpFeatures { checkpoint, images } => {
            let (png, csv) = run_dump_features(&checkpoint, &overrides, &images, &cli.out_dir)?;
            println!("grid: {}", png.display());
            println!("csv: {}", csv.display());
        }
        Cmd::MiProbe { checkpoint, split, episodes } => {
            let split = Split::parse(&split)?;
            let mse = run_mi_probe(&checkpoint, &overrides, cli.seed, split, episodes)?;
            println!("mi consistency mse: {mse}");
        }
        Cmd::GenData {
            out,
            train_classes,
            val_classes,
            test_classes,
            images_per_class,
            image_size,
            data_seed,
        } => {
            let spec = SynthSpec {
                train_classes,
                val_classes,
                test_classes,
                images_per_class,
                image_size,
                seed: data_seed,
                ..Default::default()
            };
            fewshot_core::synth::write_dataset(&spec, &out)?;
            println!(
                "wrote {} classes x {} images to {}",
                spec.total_classes(),
                images_per_class,
                out.display()
            );
        }
    }
    Ok(())
}

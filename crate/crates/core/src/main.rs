use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vpflow::data::{load_any, load_idx, synthetic_blobs, write_amat, write_patches};
use vpflow::flows::FlowKind;
use vpflow::rng::stream_rng;
use vpflow::train::{
    all_flow_kinds, evaluate, gradcheck_elbo, pgm_grid, prior_means, train, Checkpoint, GradCheckDims,
    TrainConfig, GRADCHECK_TOL,
};
use vpflow::{Error, Result};

#[derive(Parser)]
#[command(name = "vpflow", version, about = "VAEs with volume-preserving flow posteriors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Replace a config entry, e.g. `--override flow=liniaf`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Mean test bound of a checkpoint over one or more noise passes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the full ELBO gradient at toy size.
    Gradcheck {
        /// Flow kind such as `planar:2`; all kinds when omitted.
        #[arg(long)]
        flow: Option<FlowKind>,
        #[arg(long, default_value_t = 4)]
        latent: usize,
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decode prior samples into a PGM image grid.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short = 'n', default_value_t = 64)]
        n: usize,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dataset conversion utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Convert an IDX, patch or amat file to the amat text format.
    ExportAmat {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Binarization threshold for IDX input.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Keep only the first N examples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write a synthetic gray-level blob dataset as a patch file.
    SynthBlobs {
        #[arg(short = 'n', long)]
        n: usize,
        #[arg(long, default_value_t = 28)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, overrides } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            for pair in &overrides {
                cfg.apply_override(pair)?;
            }
            cfg.validate()?;
            let report = train(&cfg)?;
            println!(
                "best epoch {} of {}, validation ELBO {:.4} nats, lr {}, checkpoint {}",
                report.best_epoch,
                report.epochs_run,
                report.best_val_elbo,
                report.learning_rate,
                report.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            passes,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_any(&data)?;
            let r = evaluate(&ck, &ds, passes, seed)?;
            println!("test ELBO {:.4} ± {:.4} nats over {} pass(es)", r.mean, r.std, passes);
        }
        Command::Gradcheck {
            flow,
            latent,
            hidden,
            seed,
        } => {
            let kinds = flow.map_or_else(all_flow_kinds, |k| vec![k]);
            let dims = GradCheckDims {
                latent,
                hidden,
                ..Default::default()
            };
            let mut worst: f64 = 0.0;
            for kind in kinds {
                let r = gradcheck_elbo(kind, dims, seed)?;
                println!(
                    "{:<14} max rel error {:.3e} over {} coordinates",
                    kind.to_string(),
                    r.max_rel_error, r.coordinates
                );
                worst = if r.max_rel_error.is_nan() { f64::NAN } else { worst.max(r.max_rel_error) };
            }
            if !(worst < GRADCHECK_TOL) {
                return Err(Error::Contract(format!(
                    "gradient check failed: max rel error {worst:e} >= {GRADCHECK_TOL:e}"
                )));
            }
        }
        Command::Sample {
            checkpoint,
            n,
            output,
            seed,
        } => {
            let model = Checkpoint::load(&checkpoint)?.model()?;
            std::fs::write(&output, pgm_grid(&prior_means(&model, n, seed)?)?)?;
        }
        Command::Data { command } => match command {
            DataCommand::ExportAmat {
                input,
                output,
                threshold,
                limit,
            } => {
                let name = input.to_string_lossy();
                let mut ds = if name.ends_with(".idx") || name.ends_with("-ubyte") {
                    load_idx(&input, Some(threshold))?
                } else {
                    load_any(&input)?
                };
                if let Some(limit) = limit {
                    ds = ds.head(limit.min(ds.len()))?;
                }
                write_amat(&ds, &output)?;
            }
            DataCommand::SynthBlobs { n, side, seed, output } => {
                let ds = synthetic_blobs(n, side, &mut stream_rng(seed, 0, 0))?;
                write_patches(&ds, &output)?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

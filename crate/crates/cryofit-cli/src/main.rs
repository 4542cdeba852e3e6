//! `cryofit` — build protein structures from recognition feature grids:
//! generate oracle grids from a known structure, trace CA fragments,
//! label them against target sequences, fit an initial model, and
//! evaluate against ground truth.
//!
//! Logs go to standard error; data products are written under the
//! configured output directory. Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cryofit_core::Error;

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "cryofit", version, about = "fragment-based structure building pipeline")]
struct Cli {
    /// Pipeline configuration file (TOML); defaults apply if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Override the detection threshold.
    #[arg(long, global = true)]
    detection: Option<f64>,
    /// Override the squared linking distance bound.
    #[arg(long, global = true)]
    epsilon_sq: Option<f64>,
    /// Override the minimum fragment length.
    #[arg(long, global = true)]
    min_len: Option<usize>,
    /// Override the alignment confidence threshold.
    #[arg(long, global = true)]
    confidence: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the full default configuration as TOML.
    PrintConfig,
    /// Generate (optionally noisy) feature grids from the structure.
    Oracle {
        /// Restrict to a single chain.
        #[arg(long)]
        chain: Option<char>,
    },
    /// Trace CA fragments from the feature grids.
    Trace {
        /// Skip minimum-length pruning.
        #[arg(long)]
        no_prune: bool,
    },
    /// Label traced fragments against the target sequences.
    Align,
    /// Fit the initial structure to the accepted fragments and maps.
    Fit,
    /// Evaluate a model against the ground-truth structure.
    Eval {
        /// Model to evaluate (defaults to the fitted structure).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Sweep the fragment pruning threshold over a noisy ensemble.
    AblatePruning {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Thresholds to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5])]
        min_lens: Vec<usize>,
    },
    /// Compare joint vs per-residue amino-acid labeling over an ensemble.
    AblateAa {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::InvalidArgument(_) => ExitCode::from(1),
        Error::Numerical(_) | Error::Degenerate(_) => ExitCode::from(3),
        _ => ExitCode::from(2),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(v) = cli.detection {
        config.thresholds.detection = v;
    }
    if let Some(v) = cli.epsilon_sq {
        config.thresholds.epsilon_sq = v;
    }
    if let Some(v) = cli.min_len {
        config.thresholds.min_len = v;
    }
    if let Some(v) = cli.confidence {
        config.thresholds.confidence = v;
    }
    config.thresholds.validate()?;

    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }

    match &cli.command {
        Command::PrintConfig => {
            println!("{}", config.to_toml()?);
        }
        Command::Oracle { chain } => commands::cmd_oracle(&config, *chain)?,
        Command::Trace { no_prune } => {
            commands::cmd_trace(&config, *no_prune)?;
        }
        Command::Align => {
            commands::cmd_align(&config)?;
        }
        Command::Fit => commands::cmd_fit(&config)?,
        Command::Eval { model } => {
            commands::cmd_eval(&config, model.as_deref())?;
        }
        Command::AblatePruning { seeds, min_lens } => {
            let rows = commands::cmd_ablate_pruning(&config, *seeds, min_lens)?;
            for row in rows {
                log::info!(
                    "min_len {}: precision {:.4} recall {:.4}",
                    row.min_len,
                    row.precision,
                    row.recall
                );
            }
        }
        Command::AblateAa { seeds } => {
            let rows = commands::cmd_ablate_aa(&config, *seeds)?;
            let n = rows.len().max(1) as f64;
            let ind: f64 = rows.iter().map(|r| r.individual).sum::<f64>() / n;
            let joint: f64 = rows.iter().map(|r| r.joint).sum::<f64>() / n;
            log::info!("mean individual {ind:.4}, mean joint {joint:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; real usage errors are not
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err}");
            exit_code_for(&err)
        }
    }
}

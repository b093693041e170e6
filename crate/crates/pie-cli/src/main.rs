//! Experiment runner: configure worlds, run editing/theory/baseline
//! trajectories and hyperparameter sweeps, emit CSV tables, JSON reports,
//! and PGM heatmaps.

mod config;
mod experiment;
mod report;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("trend check failed: {0}")]
    TrendFailure(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::TrendFailure(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "pie", about = "Progressive editing experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run { config: PathBuf },
    /// Run a hyperparameter sweep over one named grid.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        grid: String,
    },
    /// Summarize an artifact directory as JSON.
    Report { dir: PathBuf },
    /// Verify trend and bound assertions over an artifact directory.
    Check { dir: PathBuf },
    /// Train a denoiser checkpoint for the image regime.
    Train {
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 2e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::from_path(path)?;
    config.apply_seed_override(std::env::var("PIE_SEED").ok())?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config } => {
            let config = load_config(&config)?;
            let out = experiment::run_experiment(config)?;
            println!("artifacts written to {}", out.display());
            Ok(())
        }
        Command::Sweep { config, grid } => {
            let config = load_config(&config)?;
            let path = experiment::sweep(config, &grid)?;
            println!("sweep written to {}", path.display());
            Ok(())
        }
        Command::Report { dir } => {
            let text = report::report(&dir)?;
            print!("{text}");
            Ok(())
        }
        Command::Check { dir } => {
            let lines = report::check(&dir)?;
            let mut failed = Vec::new();
            for line in &lines {
                println!(
                    "CHECK {}: {} ({})",
                    line.name,
                    if line.pass { "PASS" } else { "FAIL" },
                    line.detail
                );
                if !line.pass {
                    failed.push(line.name.clone());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::TrendFailure(failed.join(", ")))
            }
        }
        Command::Train {
            config,
            out,
            steps,
            batch,
            learning_rate,
            seed,
        } => {
            let config = load_config(&config)?;
            train::train_checkpoint(&config, &out, steps, batch, learning_rate, seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

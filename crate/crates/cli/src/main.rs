//! Command-line pipeline entry points.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 runtime
//! failure, 3 partial batch failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use sdnia_core::Error;

#[derive(Parser)]
#[command(
    name = "sdnia",
    about = "Stylization-driven image adaptation and detection pipeline",
    version
)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize stylized copies of a content manifest.
    Stylize(commands::stylize::StylizeArgs),
    /// Build datasets: toy shapes, degraded test sets, or mixed sets.
    BuildDataset(commands::build_dataset::BuildDatasetArgs),
    /// Train a model variant on a prepared dataset.
    Train(commands::train::TrainArgs),
    /// Score a checkpoint on labeled test sets.
    Eval(commands::eval::EvalArgs),
    /// Run detection on images, writing adapted images and overlays.
    Detect(commands::detect::DetectArgs),
    /// Run an ablation grid.
    Ablate(commands::ablate::AblateArgs),
}

/// How a command finished; maps onto the exit code contract.
pub enum Outcome {
    Success,
    PartialFailure(String),
}

fn is_validation_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Parse { .. }
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        config.output_dir = Some(dir.clone());
    }

    let result = match cli.command {
        Command::Stylize(args) => commands::stylize::run(&config, args),
        Command::BuildDataset(args) => commands::build_dataset::run(&config, args),
        Command::Train(args) => commands::train::run(&config, args),
        Command::Eval(args) => commands::eval::run(&config, args),
        Command::Detect(args) => commands::detect::run(&config, args),
        Command::Ablate(args) => commands::ablate::run(&config, args),
    };

    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::PartialFailure(msg)) => {
            eprintln!("partial failure: {msg}");
            ExitCode::from(3)
        }
        Err(e) if is_validation_error(&e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

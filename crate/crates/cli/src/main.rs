//! Batch front end wiring the library into reproducible experiments:
//! sample training data, run the finite-volume reference, train networks,
//! and evaluate eigenfunctions against references.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "eigenpde", about = "Generator spectra of overdamped diffusions", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample training data with the Euler-Maruyama scheme.
    Sample(CommonArgs),
    /// Solve the planar reference problem with the finite-volume method.
    Fvm(CommonArgs),
    /// Train networks on a sampled dataset.
    Train(CommonArgs),
    /// Evaluate checkpoints: reports, grid exports, reference comparison.
    Eval(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory from the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the seed relevant to the command (sampling or training).
    #[arg(long)]
    seed: Option<u64>,
}

fn load(args: &CommonArgs, command: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(dir) = &args.output {
        config.output.dir = dir.clone();
    }
    if let Some(seed) = args.seed {
        match command {
            "sample" => {
                if let Some(s) = config.sampling.as_mut() {
                    s.seed = seed;
                }
            }
            "train" => {
                if let Some(t) = config.training.as_mut() {
                    t.seed = seed;
                }
            }
            _ => {}
        }
    }
    Ok(config)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Sample(args) => commands::cmd_sample(&load(args, "sample")?),
        Command::Fvm(args) => commands::cmd_fvm(&load(args, "fvm")?),
        Command::Train(args) => commands::cmd_train(&load(args, "train")?),
        Command::Eval(args) => commands::cmd_eval(&load(args, "eval")?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

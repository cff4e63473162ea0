use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod dataset;

use config::ConfigFile;

/// LiDAR-guided Gaussian splatting on the CPU.
#[derive(Parser)]
#[command(name = "lgsplat", version)]
struct Cli {
    /// TOML config file; each subcommand reads its own table
    /// (`[synth]`, `[train]`, ...) and a top-level `threads` key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for rendering (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth(commands::SynthArgs),
    /// Refine camera poses against the LiDAR cloud.
    Align(commands::AlignArgs),
    /// Optimize Gaussians on a dataset.
    Train(commands::TrainArgs),
    /// Render color and depth/normal maps of a trained model.
    Render(commands::RenderArgs),
    /// Compute image and geometry metrics of a trained model.
    Eval(commands::EvalArgs),
}

fn run(cli: Cli) -> Result<()> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    let threads = cli.threads.or(file.threads()?);
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let ctx = commands::Context { file, threads };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, &a),
        Command::Align(a) => commands::align(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::Render(a) => commands::render(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

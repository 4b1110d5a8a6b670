//! Command-line entry point for the isotropic super-resolution toolkit.
//!
//! One binary, five subcommands covering the whole pipeline:
//! `phantom` (synthetic test volumes), `synthesize` (pair-cache export),
//! `train`, `reconstruct`, and `evaluate`. Behavior is driven by a
//! declarative config file plus flag overrides; every artifact gets a
//! provenance sidecar with the resolved configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or file-format
//! error, 4 numerical failure.

mod commands;
mod config;
mod provenance;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use isosr_core::{CoreError, FailureClass};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "isosr",
    version,
    about = "Self-supervised isotropic super-resolution for anisotropic 3D EM volumes"
)]
struct Cli {
    /// TOML or JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed, applied to every seeded stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic EM-like volume.
    Phantom(commands::phantom::Args),
    /// Export a cache of synthesized (LR, GT) training pairs.
    Synthesize(commands::synthesize::Args),
    /// Train the restoration network on an anisotropic volume.
    Train(commands::train::Args),
    /// Apply a trained checkpoint to an anisotropic volume.
    Reconstruct(commands::reconstruct::Args),
    /// Degrade an isotropic volume, restore it, and report metrics.
    Evaluate(commands::evaluate::Args),
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        let code = match err.class() {
            FailureClass::Config => 2,
            FailureClass::Io => 3,
            FailureClass::Numeric => 4,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CoreError::config("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CoreError::config(format!("cannot configure {n} workers: {e}")))?;
    }

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_master_seed(seed);
    }

    match &cli.command {
        Command::Phantom(args) => {
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            commands::phantom::run(&cfg, args, seed)
        }
        Command::Synthesize(args) => commands::synthesize::run(&mut cfg, args),
        Command::Train(args) => commands::train::run(&mut cfg, args),
        Command::Reconstruct(args) => commands::reconstruct::run(&mut cfg, args),
        Command::Evaluate(args) => commands::evaluate::run(&mut cfg, args),
    }
}

//! `flowmc`: experiment runner for neural importance sampling benchmarks.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::{AppendixBConfig, GuidingBenchConfig, PssBenchConfig, TrainImageConfig};

#[derive(Parser)]
#[command(
    name = "flowmc",
    version,
    about = "Normalizing-flow importance sampling experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a 2D flow to an image target.
    TrainImage(Common),
    /// Compare flow, lobe and MIS sampling on a conditional guiding scenario.
    GuidingBench(Common),
    /// Tabulate the adaptive-bin piecewise-linear gradients over theta.
    DiagnoseAppendixB(Common),
    /// Fit a flow to the synthetic primary-sample-space mixture.
    PssBench(Common),
    /// Write the shipped targets to disk.
    ExportTargets(Common),
}

fn required(config: &Option<PathBuf>) -> Result<&Path> {
    config
        .as_deref()
        .context("--config is required for this command")
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(
    config: &Option<PathBuf>,
) -> Result<T> {
    match config {
        Some(p) => Ok(config::load(p)?.0),
        None => Ok(T::default()),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FLOWMC_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("FLOWMC_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome> {
    configure_threads()?;
    match cli.command {
        Command::TrainImage(c) => {
            let (mut cfg, base) = config::load::<TrainImageConfig>(required(&c.config)?)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            commands::train_image(&cfg, &base, &c.out, c.quiet)
        }
        Command::GuidingBench(c) => {
            let (mut cfg, _) = config::load::<GuidingBenchConfig>(required(&c.config)?)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            commands::guiding_bench(&cfg, &c.out, c.quiet)
        }
        Command::DiagnoseAppendixB(c) => {
            let mut cfg: AppendixBConfig = load_or_default(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            commands::diagnose_appendix_b(&cfg, &c.out)
        }
        Command::PssBench(c) => {
            let mut cfg: PssBenchConfig = load_or_default(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            commands::pss_bench(&cfg, &c.out, c.quiet)
        }
        Command::ExportTargets(c) => commands::export_targets(&c.out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(o) if o.failed() => {
            eprintln!(
                "error: {:.2}% of training steps were rejected (threshold {:.2}%)",
                100.0 * o.rejected_fraction,
                100.0 * o.failure_threshold
            );
            ExitCode::from(2)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

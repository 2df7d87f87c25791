//! Reproducible command-line runs: data generation, training and both
//! retrieval evaluations, all driven by one JSON configuration.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "wlrn",
    version,
    about = "Learn patch descriptors from keypoint bags and evaluate retrieval"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render synthetic scenes and write train/val/test bag files.
    GenData(CommonArgs),
    /// Train the descriptor network; write the model and loss curve.
    Train(CommonArgs),
    /// Matching retrieval: tune tau on val, report on test.
    EvalMatch(CommonArgs),
    /// VLAD retrieval for every configured codebook size.
    EvalVlad(CommonArgs),
    /// Matching scores on val for every tau of the grid.
    SweepTau(CommonArgs),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Args)]
pub struct CommonArgs {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default 1).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Run directory, overriding the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::GenData(a)
            | Command::Train(a)
            | Command::EvalMatch(a)
            | Command::EvalVlad(a)
            | Command::SweepTau(a) => a,
        }
    }
}

/// Resolves the configuration, then runs the command on a pool of the
/// requested size.
pub fn run(command: &Command) -> Result<()> {
    let args = command.args();
    let cfg = RunConfig::resolve(
        args.config.as_deref(),
        &Overrides {
            seed: args.seed,
            threads: args.threads,
            out: args.out.clone(),
        },
    )?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .context("starting worker threads")?;
    pool.install(|| match command {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::Train(_) => commands::train(&cfg).map(drop),
        Command::EvalMatch(_) => commands::eval_match(&cfg).map(drop),
        Command::EvalVlad(_) => commands::eval_vlad(&cfg).map(drop),
        Command::SweepTau(_) => commands::sweep(&cfg).map(drop),
    })
}

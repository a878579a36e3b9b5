//! `diffgame`: batch front end for training, evaluation, oracles and benchmarks.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 artifact error, 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffgame::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "diffgame", about = "Neural strategies for discrete-time differential games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides `workers`).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train strategy networks and save their weights.
    Train(Common),
    /// Evaluate saved weights on the evaluation grid.
    Evaluate(Common),
    /// Grid DPP values, the finite-game enumeration or the rate check.
    Oracle {
        /// dpp, theorem1 or rate-check (overrides `oracle.task`).
        task: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Step-count sweeps and algorithm success tables.
    Bench(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Load(_) | Error::Io(_) => 3,
        _ => 4,
    }
}

fn run(cli: Cli) -> diffgame::Result<()> {
    let common = match &cli.command {
        Command::Train(c) | Command::Evaluate(c) | Command::Bench(c) => c,
        Command::Oracle { common, .. } => common,
    };
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.out = common.out.clone().or(cfg.out);
    cfg.seed = common.seed.or(cfg.seed);
    cfg.workers = common.workers.or(cfg.workers);
    let resolved = cfg.resolve()?;
    match &cli.command {
        Command::Train(_) => commands::train(&resolved),
        Command::Evaluate(_) => commands::evaluate(&resolved),
        Command::Oracle { task, .. } => commands::oracle(&resolved, task.as_deref()),
        Command::Bench(_) => commands::bench(&resolved),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                eprintln!("usage: diffgame <train|evaluate|oracle|bench> --config PATH [--out DIR] [--seed N] [--workers N]");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

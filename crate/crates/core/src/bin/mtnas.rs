use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtnas::orchestrator::{cmd_report, cmd_search, cmd_train, CommandError, RunConfig};

#[derive(Parser)]
#[command(name = "mtnas", version, about = "One-shot multi-task architecture search for window-attention networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the multi-task supernet.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train per-task minimal networks for the Delta_T baseline instead.
        #[arg(long)]
        single_task: bool,
    },
    /// Pick skeletons, then evolve a subnet for each parameter budget.
    Search {
        #[command(flatten)]
        common: Common,
        /// Parameter budget; repeat for several. Replaces the configured list.
        #[arg(long = "budget")]
        budgets: Vec<usize>,
    },
    /// Write summary tables for a finished run.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<RunConfig, CommandError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<PathBuf, CommandError> {
    match cli.command {
        Command::Train { common, single_task } => cmd_train(&load(&common)?, single_task),
        Command::Search { common, budgets } => cmd_search(&load(&common)?, &budgets),
        Command::Report { common } => cmd_report(&load(&common)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mtnas: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

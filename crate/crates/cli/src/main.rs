//! `bpme`: analysis and Monte Carlo experiments for critical branching
//! processes in a Markovian environment.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::output::ErrorRecord;

#[derive(Debug, Parser)]
#[command(name = "bpme", version, about)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Stationary law, drift, k′(0), σ², classification and lattice test.
    Analyze,
    /// Trajectory CSVs, one per replicate.
    Simulate,
    /// Table of the harmonic function V with its diagnostics.
    Harmonic,
    /// The survival constant u(i,z).
    Survival,
    /// One limit-theorem experiment: 1.1, 1.2, 1.3, 1.4 or P2.3.
    Theorem { id: String },
    /// Exact-identity suites; exits nonzero on any failure.
    VerifyIdentities,
    /// Rescales one state's offspring mean to make the model critical.
    Calibrate {
        #[arg(long)]
        state: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BPME_LOG", "warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let Some(path) = cli.config.as_deref() else {
        ErrorRecord::usage("--config PATH is required").emit();
        return ExitCode::from(2);
    };
    match commands::run(&cli.command, path, cli.seed, cli.out.as_deref()) {
        Ok(commands::Outcome::Passed) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Failed) => ExitCode::from(1),
        Err(record) => {
            record.emit();
            ExitCode::from(2)
        }
    }
}

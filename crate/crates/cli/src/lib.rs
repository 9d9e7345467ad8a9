//! Command-line front end for the `hypermerton` library.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 solver non-convergence (diagnostics still written), 4 oracle control
//! boundary contact above 1%, 5 partial comparison report.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Workspace;
use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "hypermerton", version, about = "Consumption and investment under non-constant discounting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output.directory`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replaces `simulation.seed`.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Policy files and solver diagnostics for every configured agent.
    Solve,
    /// Discrete equilibrium recursion at N and 2N steps with a Richardson table.
    Oracle,
    /// Agent comparison report and table.
    Compare,
    /// Monte Carlo wealth and consumption paths.
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Status {
    Ok = 0,
    Failure = 1,
    Config = 2,
    NonConvergence = 3,
    BoundaryContact = 4,
    Partial = 5,
}

impl Status {
    pub fn code(self) -> u8 {
        self as u8
    }
}

/// Marks an error as a configuration problem (exit 2).
#[derive(Debug)]
pub struct ConfigProblem(pub String);

impl std::fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigProblem {}

pub(crate) fn config_error(msg: &str) -> anyhow::Error {
    ConfigProblem(msg.to_string()).into()
}

pub fn run(cli: &Cli) -> Status {
    let Some(path) = &cli.config else {
        eprintln!("error: --config is required");
        return Status::Config;
    };
    let config = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return Status::Config;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return Status::Config;
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli.out.clone().unwrap_or_else(|| config.output.directory.clone());
    if let Err(e) = commands::ensure_dir(&out) {
        eprintln!("error: {e:#}");
        return Status::Failure;
    }
    let cx = Workspace { config: &config, out };
    let result = match cli.command {
        Command::Solve => commands::solve(&cx),
        Command::Oracle => commands::oracle(&cx),
        Command::Compare => commands::compare(&cx),
        Command::Simulate => commands::simulate_cmd(&cx, cli.seed_override),
    };
    match result {
        Ok(s) => s,
        Err(e) if e.is::<ConfigProblem>() => {
            eprintln!("{}: {e}", path.display());
            Status::Config
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            Status::Failure
        }
    }
}

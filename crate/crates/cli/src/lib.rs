//! Command-line front end: solve pose problems from JSON, run synthetic
//! benchmark sweeps and propagate triangulation covariances.

pub mod commands;
pub mod error;
pub mod files;

use clap::{Parser, Subcommand};

pub use commands::{EXIT_FALLBACK, EXIT_INPUT, EXIT_OK};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "uncpnp", version, about = "Uncertainty-aware PnP/PnL pose estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate a camera pose from a problem file.
    Solve(commands::SolveArgs),
    /// Run a synthetic Monte Carlo sweep and write CSV tables.
    Bench(commands::BenchArgs),
    /// Triangulate tracks and propagate their covariances.
    Propagate(commands::PropagateArgs),
}

/// Parses `args` and runs the command, returning the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are input errors; help and version are not
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let res = match &cli.command {
        Command::Solve(a) => commands::cmd_solve(a),
        Command::Bench(a) => commands::cmd_bench(a),
        Command::Propagate(a) => commands::cmd_propagate(a),
    };
    res.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_INPUT
    })
}

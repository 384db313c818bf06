//! `ofps`: probe-state catalog, optimization, sweeps, Fisher-information
//! curves and Bayesian simulations from the command line.

mod commands;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CurvesArgs, OfpsArgs, OptimizeArgs, SimulateArgs, SweepArgs};

/// Exit status when a requested validation failed.
const EXIT_VALIDATION: u8 = 3;
/// Exit status for runtime failures (infeasible problems, I/O).
const EXIT_FAILURE: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "ofps", version, about = "Optimal probe states for lossy two-mode phase estimation")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "OFPS_THREADS")]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print an analytical noiseless optimal probe state and its QFI.
    Ofps(OfpsArgs),
    /// Search for the probe state with the largest QFI under loss.
    Optimize(OptimizeArgs),
    /// Optimize over a grid of transmissions.
    Sweep(SweepArgs),
    /// QFI and CFI of several measurements as functions of the phase.
    Curves(CurvesArgs),
    /// Monte-Carlo Bayesian estimation runs.
    Simulate(SimulateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }

    let result = match &cli.command {
        Command::Ofps(a) => commands::ofps(a),
        Command::Optimize(a) => commands::optimize(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Curves(a) => commands::curves(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    match result {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::ValidationFailed(msg)) => {
            eprintln!("validation failed: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

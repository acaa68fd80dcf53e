//! Command-line experiment runner: simulate, optimize, evaluate, fidelity,
//! calibrate, and report workflows driven by a single config file.

mod commands;
mod report;

use clap::{Parser, Subcommand};
use conjsim::Error;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "conjsim",
    version,
    about = "Conjunctive-trigger attack simulator and optimizer"
)]
struct Cli {
    /// Path to the run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for the manifest, logs, and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the configured per-regime episode count.
    #[arg(long, global = true)]
    episodes: Option<usize>,

    /// Worker threads for episode execution (default: all cores).
    #[arg(long, global = true)]
    parallelism: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured regime; write episode logs and the regime report.
    Simulate,
    /// Optimize the attack configuration; write the decoded tuple and loss trace.
    Optimize {
        /// Also simulate all regimes under the optimized configuration.
        #[arg(long)]
        simulate: bool,
    },
    /// Optimize at every level and simulate each decoded configuration.
    Evaluate {
        /// Optimization seeds per level.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Run the topology x routing-bias surrogate-fidelity grid.
    Fidelity,
    /// Print the two-anchor calibration solution.
    Calibrate,
    /// Summarize episode logs into plain-text and JSON tables.
    Report {
        /// Episode log paths (line-delimited JSON).
        logs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(threads) = cli.parallelism {
        if threads == 0 {
            eprintln!("error: --parallelism must be at least 1");
            return ExitCode::from(EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invalid_input() {
                ExitCode::from(EXIT_VALIDATION)
            } else if e.is_io() {
                ExitCode::from(EXIT_IO)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let overrides = commands::Overrides {
        seed: cli.seed,
        episodes: cli.episodes,
    };
    match cli.command {
        Command::Simulate => commands::cmd_simulate(cli.config.as_deref(), &cli.out, &overrides),
        Command::Optimize { simulate } => {
            commands::cmd_optimize(cli.config.as_deref(), &cli.out, &overrides, simulate)
        }
        Command::Evaluate { seeds } => {
            commands::cmd_evaluate(cli.config.as_deref(), &cli.out, &overrides, seeds)
        }
        Command::Fidelity => commands::cmd_fidelity(cli.config.as_deref(), &cli.out, &overrides),
        Command::Calibrate => commands::cmd_calibrate(&cli.out),
        Command::Report { logs } => commands::cmd_report(&logs, cli.config.as_deref(), &cli.out),
    }
}

//! `stm`: configuration-driven experiment runner for the stochastic theta
//! method on monotone jump-diffusion SDEs.
//!
//! Usage: `stm --config run.toml --command lyapunov [--seed N] [--workers N]
//! [--out DIR]`. Every run writes `manifest.toml` (the fully-resolved config)
//! next to its CSV outputs; re-running the manifest reproduces them bitwise.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use commands::{run, Overrides, COMMANDS};

#[derive(Parser, Debug)]
#[command(name = "stm", version, about = "Stochastic theta method experiment runner")]
struct Args {
    /// TOML experiment configuration (strict: unknown keys are rejected).
    #[arg(long)]
    config: PathBuf,

    /// Command to run; falls back to the `command` key in the config.
    #[arg(long, help = format!("Command to run, one of: {}", COMMANDS.join(", ")))]
    command: Option<String>,

    /// Overrides `master_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads (0 = one per core); overrides `workers`.
    #[arg(long)]
    workers: Option<usize>,

    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let overrides = Overrides {
        command: args.command,
        seed: args.seed,
        workers: args.workers,
        out: args.out,
    };
    match run(&args.config, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Precondition failures print their step-size report to stdout so
            // the caller sees exactly which condition blocked the run.
            if e.exit_code() == 2 {
                println!("{e}");
                eprintln!("error: step-size preconditions not met");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        }
    }
}

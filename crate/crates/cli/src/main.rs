//! `paroc` command line: solve a control problem, certify first-order
//! optimality, run second-order and regularity checks, and sweep parameter
//! grids. Exit codes: 0 success/certified, 1 check failed, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Ctx, EXIT_USAGE};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "paroc", about = "Parabolic optimal-control solver and verification toolkit")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override for all sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel workers for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimizer and persist the solution directory.
    Solve,
    /// Recompute multipliers and residuals for a stored solution.
    Certify { solution_dir: PathBuf },
    /// Sample second-order conditions and test quadratic growth.
    Soc { solution_dir: PathBuf },
    /// Estimate Hölder exponents and check the maximum principle.
    Regularity { solution_dir: PathBuf },
    /// Run the pipeline over a parameter grid.
    Sweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config is required");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let config = match RunConfig::from_path(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let ctx = Ctx {
        config,
        out_override: cli.out,
        seed_override: cli.seed,
        quiet: cli.quiet,
        jobs: cli.jobs.max(1),
    };
    let code = match &cli.command {
        Command::Solve => commands::cmd_solve(&ctx),
        Command::Certify { solution_dir } => commands::cmd_certify(&ctx, solution_dir),
        Command::Soc { solution_dir } => commands::cmd_soc(&ctx, solution_dir),
        Command::Regularity { solution_dir } => commands::cmd_regularity(&ctx, solution_dir),
        Command::Sweep => commands::cmd_sweep(&ctx),
    };
    ExitCode::from(code as u8)
}

//! Command-line harness for the robust modular gating experiments.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical or configuration
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use modgate::harness::{
    config::Config, run_analyze, run_distill, run_fit_experts, run_sample, run_solve, run_sweep,
    CONFIG_KEY_HELP,
};
use modgate::Error;

#[derive(Parser)]
#[command(
    name = "modgate",
    about = "Robust modular sequence modeling: fit experts, solve the worst-case-mixture game, sweep, sample, distill, analyze",
    after_long_help = CONFIG_KEY_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Seed for every random choice the run makes; overrides the config's
    /// `seed` key. Identical seeds give identical output bytes.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Fit Markov experts on the configured domains and write a manifest
    /// with their measured per-source errors.
    FitExperts(CommonArgs),
    /// Solve the minimax game (exact, primal-dual, or quadratic penalty) and
    /// persist the gate, the trace CSV, and a bound report.
    Solve(CommonArgs),
    /// Exact population NLL of gate and baselines across the mixture grid.
    Sweep(CommonArgs),
    /// Sample a corpus from the gated model via SIR or rejection sampling.
    Sample(CommonArgs),
    /// Structural and monolithic distillation plus a per-mixture comparison.
    Distill(CommonArgs),
    /// Bound terms, divergence identities, and geometric constants.
    Analyze(CommonArgs),
}

fn run(
    args: &CommonArgs,
    f: impl Fn(&Config, u64, &std::path::Path) -> modgate::Result<()>,
) -> modgate::Result<()> {
    let cfg = Config::load(&args.config)?;
    let seed = match args.seed {
        Some(s) => s,
        None => cfg.u64_opt("seed", 0)?,
    };
    f(&cfg, seed, &args.out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; everything else is usage.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::FitExperts(a) => run(a, run_fit_experts),
        Command::Solve(a) => run(a, run_solve),
        Command::Sweep(a) => run(a, run_sweep),
        Command::Sample(a) => run(a, run_sample),
        Command::Distill(a) => run(a, run_distill),
        Command::Analyze(a) => run(a, run_analyze),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

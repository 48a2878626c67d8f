//! Command-line front end: configuration ingestion, subcommand dispatch,
//! report emission and the exit-code contract.
//!
//! Exit codes: 0 success, 2 target unreachable from the manifold, 3 invalid
//! configuration, 4 numerical failure.

mod commands;
mod config;
mod jsonout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Failure, Outputs};
use config::Overrides;

#[derive(Parser)]
#[command(
    name = "stoclq",
    version,
    about = "Stochastic linear-quadratic control with pinned terminal states \
             and manifold-constrained initial states"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON configuration.
    #[arg(long)]
    config: PathBuf,

    /// Directory for report.json, run_meta.json and requested dumps.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,

    /// Override the grid step count (constant-coefficient configs only).
    #[arg(long)]
    steps: Option<usize>,

    /// Override the noise seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Perturbation step for the optimality checks.
    #[arg(long)]
    eps: Option<f64>,

    /// Dump Sigma and the affine backward coefficients as CSV (needs --out).
    #[arg(long, requires = "out")]
    dump_riccati: bool,

    /// Dump per-path trajectories as CSV (needs --out).
    #[arg(long, requires = "out")]
    dump_trajectories: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: multiplier, optimal ensemble, cost and checks.
    Solve(CommonArgs),
    /// Reachability of the target from the configured manifold.
    Reach(CommonArgs),
    /// Monte Carlo Gramian of the hat system against Sigma(t).
    Gramian(CommonArgs),
    /// Reduce a raw system to canonical form.
    Transform(CommonArgs),
    /// Minimum-energy transfer from `transfer.x0` to the target.
    Transfer(CommonArgs),
    /// Run the invariant battery and print pass/fail per check.
    Verify(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Reach(_) => "reach",
            Command::Gramian(_) => "gramian",
            Command::Transform(_) => "transform",
            Command::Transfer(_) => "transfer",
            Command::Verify(_) => "verify",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Solve(a)
            | Command::Reach(a)
            | Command::Gramian(a)
            | Command::Transform(a)
            | Command::Transfer(a)
            | Command::Verify(a) => a,
        }
    }
}

fn run(cli: &Cli) -> Result<i32, Failure> {
    let args = cli.command.args();
    let cfg = config::read_config(&args.config)?;
    let ov = Overrides {
        paths: args.paths,
        steps: args.steps,
        seed: args.seed,
        eps: args.eps,
    };
    let outputs = Outputs {
        out_dir: args.out.as_deref(),
        dump_riccati: args.dump_riccati,
        dump_trajectories: args.dump_trajectories,
    };
    match &cli.command {
        Command::Solve(_) => commands::solve(&cfg, &ov, &outputs),
        Command::Reach(_) => commands::reach(&cfg, &ov, &outputs),
        Command::Gramian(_) => commands::gramian(&cfg, &ov, &outputs),
        Command::Transform(_) => commands::transform(&cfg, &ov, &outputs),
        Command::Transfer(_) => commands::transfer(&cfg, &ov, &outputs),
        Command::Verify(_) => commands::verify(&cfg, &ov, &outputs),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            print!("{}", failure.report(cli.command.name()).render());
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}

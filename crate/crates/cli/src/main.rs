//! `cogrelay`: calibrate, simulate, sweep and verify from the command line.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cogrelay::oracle::Fault;

#[derive(Parser)]
#[command(name = "cogrelay", version, about = "Cross-layer routing and power control for cognitive relay chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the run seed of the configuration.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory (default: `output.dir` of the configuration).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Scheme to run; repeatable (default: the configuration's list).
    #[arg(long = "scheme", value_name = "NAME")]
    schemes: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the offline problem and write per-pair policy artifacts.
    Calibrate(Common),
    /// Simulate the requested schemes using calibrated artifacts.
    Simulate(Common),
    /// Re-solve and simulate over a one-dimensional parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid as KEY=START:STOP:STEP (inclusive), e.g. p0_db=0:40:5.
        #[arg(long, value_name = "KEY=START:STOP:STEP")]
        grid: String,
    },
    /// Run the oracle cross-checks and write a JSON report.
    Verify {
        #[arg(long, value_name = "U64", default_value_t = 1)]
        seed: u64,
        #[arg(long, value_name = "DIR", default_value = "out")]
        out: PathBuf,
        #[arg(long, value_name = "N")]
        threads: Option<usize>,
        /// Deliberately break a check to confirm the suite catches it.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    FlowBalanceSignFlip,
}

fn threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Calibrate(c) => {
            threads(c.threads)?;
            let ctx = commands::load(&c.config, c.seed, c.out, &c.schemes)?;
            commands::calibrate(&ctx)?;
        }
        Command::Simulate(c) => {
            threads(c.threads)?;
            let ctx = commands::load(&c.config, c.seed, c.out, &c.schemes)?;
            commands::simulate(&ctx)?;
        }
        Command::Sweep { common: c, grid } => {
            threads(c.threads)?;
            let ctx = commands::load(&c.config, c.seed, c.out, &c.schemes)?;
            let failures = commands::sweep(&ctx, &grid)?;
            if failures > 0 {
                eprintln!("{failures} grid point(s) failed; see sweep-manifest.json");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Verify {
            seed,
            out,
            threads: n,
            inject_fault,
        } => {
            threads(n)?;
            let fault = inject_fault.map(|f| match f {
                FaultArg::FlowBalanceSignFlip => Fault::FlowBalanceSignFlip,
            });
            if !commands::verify(&out, seed, fault)? {
                eprintln!("verification failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

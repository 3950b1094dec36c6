use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use agis_cli::orchestrate::cmd_worker;
use agis_cli::simulate::SimulateSummary;
use agis_cli::{
    cmd_report, cmd_simulate, cmd_solve, cmd_status, CliError, RunConfig, RunDir, SolveOptions,
};
use clap::{Parser, Subcommand};

/// Desk-scale astrometric global iterative solution.
#[derive(Parser)]
#[command(name = "agis", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a catalog and its observations into a new run directory.
    Simulate {
        /// JSON run configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Iterate to convergence with worker processes, then solve the
    /// secondary sources. Resumes from the run's checkpoint if there is one.
    Solve {
        #[arg(long)]
        run_dir: PathBuf,
        /// Overrides the configured worker count.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, hide = true)]
        halt_after: Option<u32>,
    },
    /// Claim and process jobs from the run's whiteboard until none are pending.
    Worker {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value = "w0")]
        worker_id: String,
        #[arg(long, hide = true)]
        crash_after_claims: Option<u32>,
    },
    /// Accuracy against the truth, χ² history and throughput of a solved run.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Checkpointed iterations and job table of a run.
    Status {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn json_line<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string(value).expect("json"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Cmd::Simulate {
            config,
            run_dir,
            seed,
        } => {
            let mut c = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            let m = cmd_simulate(&c, &RunDir::new(&run_dir))?;
            json_line(&SimulateSummary::of(&m))?;
        }
        Cmd::Solve {
            run_dir,
            workers,
            halt_after,
        } => {
            let exe = std::env::current_exe()?;
            let opts = SolveOptions {
                workers,
                halt_after,
                ..SolveOptions::new(&exe)
            };
            let s = cmd_solve(&RunDir::new(&run_dir), &opts)?;
            json_line(&serde_json::json!({
                "record": "solve",
                "converged": s.converged,
                "termination": s.reason,
                "outer_iterations": s.convergence.records.len(),
                "resumed_iterations": s.resumed_iterations,
                "secondary_updated": s.secondary_updated,
                "secondary_underdetermined": s.secondary_underdetermined.len(),
            }))?;
        }
        Cmd::Worker {
            run_dir,
            worker_id,
            crash_after_claims,
        } => {
            let stats = cmd_worker(&RunDir::new(&run_dir), &worker_id, crash_after_claims, true)?;
            if stats.crashed {
                eprintln!("agis: worker {worker_id} stopped by fault injection");
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Report { run_dir } => {
            cmd_report(&RunDir::new(&run_dir), &mut std::io::stdout().lock())?
        }
        Cmd::Status { run_dir } => {
            cmd_status(&RunDir::new(&run_dir), &mut std::io::stdout().lock())?
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("agis: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `agis solve`: posts each iteration's jobs to the run's whiteboard, spawns
//! worker processes to drain them, merges the envelopes and applies the
//! block updates. Progress is checkpointed after every outer iteration, and
//! a solve started on a run directory with a checkpoint resumes from it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use agis_core::datatrain::{shared_state_path, NON_FINITE_FAILURE};
use agis_core::io::{read_snapshot, write_atomic, write_catalog, write_snapshot, Snapshot};
use agis_core::model::{SourceId, SourceParams};
use agis_core::simulator::ScanLaw;
use agis_core::solver::{
    run_agis_from, secondary_solve, BatchExecutor, ConvergenceReport, RunProgress, SolverState,
    Termination,
};
use agis_core::units::MAS;
use agis_core::whiteboard::{
    FileJobStore, JobKind, JobState, JobStore, PartialEnvelope, SourceResult, SourceStatus,
    StoreError, SystemClock,
};
use agis_core::SolveError;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::CrashInjection;
use crate::{CliError, Manifest, RunDir};

/// Consecutive worker rounds without a completed job before giving up.
const MAX_IDLE_ROUNDS: u32 = 3;

pub const FORMAL_ERRORS_HEADER: &str = "source_id,status,n_obs,sigma_alpha_star_mas,sigma_delta_mas,sigma_parallax_mas,sigma_pm_alpha_star_masyr,sigma_pm_delta_masyr";

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Executable started as `<program> worker --run-dir <dir> --worker-id <id>`.
    pub worker_program: PathBuf,
    /// Overrides the configured worker count.
    pub workers: Option<usize>,
    /// Stop with [`SolveError::Halted`] once this many outer iterations are
    /// checkpointed.
    pub halt_after: Option<u32>,
}

impl SolveOptions {
    pub fn new(worker_program: &Path) -> Self {
        SolveOptions {
            worker_program: worker_program.to_path_buf(),
            workers: None,
            halt_after: None,
        }
    }
}

/// Contents of `solve.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub converged: bool,
    pub termination: Termination,
    pub reason: String,
    pub workers: usize,
    /// Outer iterations taken from the checkpoint rather than computed.
    pub resumed_iterations: usize,
    pub secondary_updated: usize,
    pub secondary_passes: u32,
    pub secondary_underdetermined: Vec<SourceId>,
    pub convergence: ConvergenceReport,
}

/// Runs source jobs through worker processes sharing the run's whiteboard.
pub struct WhiteboardExecutor {
    run: RunDir,
    store: FileJobStore,
    program: PathBuf,
    workers: usize,
    batch_size: usize,
    lease_ms: u64,
    crash: Option<CrashInjection>,
}

impl WhiteboardExecutor {
    fn publish_state(&self, state: &SolverState, law: &ScanLaw) -> Result<(), SolveError> {
        let path = shared_state_path(&self.run.whiteboard(), state.iteration);
        let snap = Snapshot {
            state: state.clone(),
            law: *law,
        };
        let io = |e: agis_core::io::FormatError| SolveError::Executor(e.to_string());
        if path.exists() {
            if read_snapshot(&path).map_err(io)? != snap {
                return Err(SolveError::Store(StoreError::Corrupt(format!(
                    "{} holds a different state for iteration {}",
                    path.display(),
                    state.iteration
                ))));
            }
            return Ok(());
        }
        write_snapshot(&path, &snap).map_err(io)
    }

    /// Start a round of workers and wait for all of them. Returns the
    /// standard error of those that exited unsuccessfully.
    fn spawn_round(&mut self, n: usize, iteration: u32) -> Result<String, SolveError> {
        let spawn_err = |e: std::io::Error| {
            SolveError::Executor(format!("cannot start {}: {e}", self.program.display()))
        };
        let mut children = Vec::with_capacity(n);
        for k in 0..n {
            let mut cmd = Command::new(&self.program);
            cmd.arg("worker")
                .arg("--run-dir")
                .arg(&self.run.root)
                .arg("--worker-id")
                .arg(format!("w{k}"))
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::piped());
            if k == 0 {
                if let Some(c) = self.crash.filter(|c| c.iteration == iteration) {
                    cmd.arg("--crash-after-claims")
                        .arg(c.after_claims.to_string());
                    self.crash = None;
                }
            }
            children.push(cmd.spawn().map_err(spawn_err)?);
        }
        let mut errors = String::new();
        for (k, child) in children.into_iter().enumerate() {
            let out = child.wait_with_output().map_err(spawn_err)?;
            if !out.status.success() {
                let _ = writeln!(
                    errors,
                    "worker w{k} ({}): {}",
                    out.status,
                    String::from_utf8_lossy(&out.stderr).trim()
                );
            }
        }
        Ok(errors)
    }
}

impl BatchExecutor for WhiteboardExecutor {
    fn run_jobs(
        &mut self,
        kind: JobKind,
        ids: &[SourceId],
        state: &SolverState,
        law: &ScanLaw,
    ) -> Result<Vec<PartialEnvelope>, SolveError> {
        self.publish_state(state, law)?;
        let posted: BTreeSet<_> = self
            .store
            .post_jobs(state.iteration, kind, ids, self.batch_size)?
            .into_iter()
            .collect();
        let mut idle_rounds = 0;
        let mut last_errors = String::new();
        loop {
            self.store.expire_leases(self.store.now_ms())?;
            let jobs: Vec<_> = self
                .store
                .jobs()?
                .into_iter()
                .filter(|j| posted.contains(&j.job_id))
                .collect();
            if let Some(j) = jobs.iter().find(|j| j.state == JobState::Failed) {
                let why = j.failure.clone().unwrap_or_default();
                return Err(match why.strip_prefix(NON_FINITE_FAILURE) {
                    Some(rest) => SolveError::Store(StoreError::FiniteCheckFailed {
                        job_id: j.job_id,
                        location: rest.trim_start_matches(':').trim().to_string(),
                    }),
                    None => SolveError::Executor(format!("job {} failed: {why}", j.job_id)),
                });
            }
            let done = jobs.iter().filter(|j| j.state == JobState::Done).count();
            if done == jobs.len() {
                return jobs.iter().map(|j| Ok(self.store.envelope(j)?)).collect();
            }
            let pending = jobs.iter().filter(|j| j.state == JobState::Pending).count();
            if pending > 0 {
                if idle_rounds >= MAX_IDLE_ROUNDS {
                    return Err(SolveError::Executor(format!(
                        "workers completed no job in {MAX_IDLE_ROUNDS} rounds; {last_errors}"
                    )));
                }
                last_errors = self.spawn_round(self.workers.min(pending), state.iteration)?;
                let after = self
                    .store
                    .jobs()?
                    .iter()
                    .filter(|j| posted.contains(&j.job_id) && j.state == JobState::Done)
                    .count();
                idle_rounds = if after > done { 0 } else { idle_rounds + 1 };
            } else {
                // claimed by workers that are gone: wait for the leases
                let now = self.store.now_ms();
                let expiry = jobs
                    .iter()
                    .filter_map(|j| j.lease_expiry)
                    .min()
                    .unwrap_or(now);
                let wait = expiry.saturating_sub(now).min(self.lease_ms) + 1;
                std::thread::sleep(Duration::from_millis(wait));
            }
        }
    }

    fn workers(&self) -> usize {
        self.workers
    }
}

fn solve_err(e: CliError) -> SolveError {
    match e {
        CliError::Solve(e) => e,
        other => SolveError::Executor(other.to_string()),
    }
}

fn anchors(truth: &SolverState, n: usize) -> Vec<(SourceId, SourceParams)> {
    truth.sources[..n.min(truth.sources.len())]
        .iter()
        .enumerate()
        .map(|(i, s)| (i as SourceId, *s))
        .collect()
}

fn write_formal_errors(path: &Path, results: &[SourceResult]) -> Result<(), CliError> {
    let mut out = String::with_capacity(results.len() * 120);
    out.push_str(FORMAL_ERRORS_HEADER);
    out.push('\n');
    for r in results {
        let status = match r.status {
            SourceStatus::Updated => "updated",
            SourceStatus::Underdetermined => "underdetermined",
        };
        let _ = write!(out, "{},{status},{}", r.source_id, r.n_obs);
        for s in r.formal_errors() {
            let _ = write!(out, ",{:?}", s / MAS);
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// Solve the run to convergence (or `max_outer`), then update the secondary
/// sources against the final attitude, calibration and global parameters.
/// Outputs are written even when the run did not converge, in which case the
/// result is [`CliError::NotConverged`].
pub fn cmd_solve(run: &RunDir, opts: &SolveOptions) -> Result<SolveSummary, CliError> {
    let manifest = Manifest::load(run)?;
    manifest.verify_artifacts(run)?;
    let mut config = manifest.config.clone();
    if let Some(w) = opts.workers {
        config.workers = w;
    }
    config.validate()?;
    let start = read_snapshot(&run.start_state())?;
    let truth = read_snapshot(&run.truth_state())?;
    let law = start.law;
    let anchors = anchors(&truth.state, config.n_anchors.unwrap_or(config.n_primary()));
    let digest = config.result_digest();
    let progress = match read_checkpoint(&run.checkpoint(), &digest)? {
        Some(p) => p,
        None => RunProgress::start(start.state, &config.solver, &law),
    };
    let resumed_iterations = progress.records.len();

    let mut exec = WhiteboardExecutor {
        run: run.clone(),
        store: FileJobStore::open(&run.whiteboard(), Box::new(SystemClock))?,
        program: opts.worker_program.clone(),
        workers: config.workers,
        batch_size: config.batch_size,
        lease_ms: config.lease_ms,
        crash: config.faults.crash,
    };
    let outcome = run_agis_from(progress, &mut exec, &config.solver, &law, &anchors, |p| {
        write_checkpoint(&run.checkpoint(), &digest, p).map_err(solve_err)?;
        let n = p.records.len() as u32;
        match opts.halt_after {
            Some(h) if n >= h => Err(SolveError::Halted(n)),
            _ => Ok(()),
        }
    });
    let outcome = match outcome {
        Err(SolveError::Halted(n)) => {
            return Err(CliError::NotConverged(format!(
                "halted after {n} outer iterations; solve again to resume"
            )))
        }
        other => other?,
    };

    let ids: Vec<SourceId> = (0..config.n_sources as SourceId).collect();
    let secondary = secondary_solve(
        &outcome.state,
        &ids,
        &mut exec,
        &law,
        config.solver.tol_update,
    )?;
    let mut state = outcome.state;
    let n_primary = state.n_primary as SourceId;
    let mut secondary_updated = 0;
    for r in &secondary.results {
        if r.source_id >= n_primary && r.status == SourceStatus::Updated {
            state.sources[r.source_id as usize] = r.params;
            secondary_updated += 1;
        }
    }

    let rows: Vec<_> = state
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| (i as SourceId, *s))
        .collect();
    write_catalog(&run.final_catalog(), &rows)?;
    write_formal_errors(&run.formal_errors(), &secondary.results)?;
    write_snapshot(&run.final_state(), &Snapshot { state, law })?;
    let termination = outcome.report.termination;
    let summary = SolveSummary {
        converged: termination.converged(),
        termination,
        reason: termination.describe().to_string(),
        workers: config.workers,
        resumed_iterations,
        secondary_updated,
        secondary_passes: secondary.passes,
        secondary_underdetermined: secondary
            .underdetermined
            .iter()
            .copied()
            .filter(|&id| id >= n_primary)
            .collect(),
        convergence: outcome.report,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary") + "\n";
    write_atomic(&run.solve_report(), text.as_bytes())?;
    if !summary.converged {
        return Err(CliError::NotConverged(format!(
            "{} after {} outer iterations; outputs written",
            summary.reason,
            summary.convergence.records.len()
        )));
    }
    Ok(summary)
}

/// `agis worker`: drain the run's whiteboard with the configured leases.
pub fn cmd_worker(
    run: &RunDir,
    worker_id: &str,
    crash_after_claims: Option<u32>,
    echo: bool,
) -> Result<agis_core::datatrain::WorkerStats, CliError> {
    let store = run.whiteboard();
    if !store.join("store.json").exists() {
        return Err(CliError::MissingArtifact(store));
    }
    let manifest = Manifest::load(run)?;
    let c = &manifest.config;
    let mut wc = agis_core::datatrain::WorkerConfig::new(worker_id, &store);
    wc.lease = Duration::from_millis(c.lease_ms);
    wc.heartbeat = Duration::from_millis(c.heartbeat_ms);
    wc.max_batch_memory = c.max_batch_memory;
    wc.crash_after_claims = crash_after_claims;
    wc.echo = echo;
    wc.validate().map_err(CliError::Validation)?;
    Ok(agis_core::datatrain::run_datatrain(&wc)?)
}

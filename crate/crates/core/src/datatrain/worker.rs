use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{process_batch, BatchError, BudgetedStore};
use crate::io::{read_snapshot, FormatError, ObservationStore, Snapshot};
use crate::whiteboard::{
    Completion, FileJobStore, JobId, JobKind, JobStore, StoreError, SystemClock,
};

/// Failure text prefix for jobs aborted by the non-finite tripwire.
pub const NON_FINITE_FAILURE: &str = "non-finite";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub worker_id: String,
    /// Whiteboard directory.
    pub store_path: PathBuf,
    pub lease: Duration,
    pub heartbeat: Duration,
    /// Bytes of observation records resident at once.
    pub max_batch_memory: u64,
    /// Update the sources of a batch on the rayon pool.
    pub parallel_sources: bool,
    /// Fault injection: stop dead after claiming this many jobs, leaving the
    /// last one CLAIMED.
    pub crash_after_claims: Option<u32>,
    /// Echo per-job records to stdout.
    pub echo: bool,
}

impl WorkerConfig {
    pub fn new(worker_id: &str, store_path: &Path) -> Self {
        WorkerConfig {
            worker_id: worker_id.to_string(),
            store_path: store_path.to_path_buf(),
            lease: Duration::from_secs(60),
            heartbeat: Duration::from_secs(10),
            max_batch_memory: 256 << 20,
            parallel_sources: false,
            crash_after_claims: None,
            echo: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.worker_id.is_empty() || self.worker_id.contains(['/', '\\']) {
            return Err(format!("invalid worker id {:?}", self.worker_id));
        }
        if !(self.lease > self.heartbeat && !self.heartbeat.is_zero()) {
            return Err("require lease > heartbeat > 0".into());
        }
        if self.max_batch_memory == 0 {
            return Err("max_batch_memory must be positive".into());
        }
        Ok(())
    }
}

/// Inputs shared by every worker of a store, written by the orchestrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerInputs {
    pub observations: PathBuf,
}

pub fn prepare_store(store_path: &Path, inputs: &WorkerInputs) -> Result<(), StoreError> {
    std::fs::create_dir_all(store_path.join("shared"))?;
    let text = serde_json::to_string_pretty(inputs).expect("inputs");
    crate::io::write_atomic(&store_path.join("inputs.json"), text.as_bytes())?;
    Ok(())
}

/// Snapshot of the state a given iteration's jobs run against.
pub fn shared_state_path(store_path: &Path, iteration: u32) -> PathBuf {
    store_path
        .join("shared")
        .join(format!("iter-{iteration:04}.state"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub worker: String,
    pub job_id: JobId,
    pub iteration: u32,
    pub kind: JobKind,
    pub n_sources: u64,
    pub n_obs: u64,
    pub wall_s: f64,
    pub obs_per_hour: f64,
    pub outcome: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerStats {
    pub worker: String,
    pub jobs: u64,
    pub failed_jobs: u64,
    pub n_obs: u64,
    pub busy_s: f64,
    pub wall_s: f64,
    /// Observations per hour of this worker's wall time.
    pub obs_per_hour: f64,
    /// Stopped by the crash hook.
    pub crashed: bool,
}

fn stats_file(store_path: &Path, worker: &str) -> Result<std::fs::File, StoreError> {
    let dir = store_path.join("stats");
    std::fs::create_dir_all(&dir)?;
    Ok(OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(format!("{worker}.jsonl")))?)
}

fn emit<T: Serialize>(file: &mut std::fs::File, echo: bool, record: &T) -> Result<(), StoreError> {
    let line = serde_json::to_string(record).expect("stats record");
    writeln!(file, "{line}")?;
    if echo {
        println!("{line}");
    }
    Ok(())
}

/// Claim, process and complete jobs until none are PENDING. Job-level
/// failures mark the job FAILED and the loop continues; store and format
/// errors end the worker.
pub fn run_datatrain(config: &WorkerConfig) -> Result<WorkerStats, BatchError> {
    config
        .validate()
        .map_err(|e| BatchError::Store(StoreError::Invalid(e)))?;
    let store = FileJobStore::open(&config.store_path, Box::new(SystemClock))?;
    let inputs: WorkerInputs = {
        let p = config.store_path.join("inputs.json");
        let text = std::fs::read_to_string(&p).map_err(StoreError::Io)?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt(format!("inputs.json: {e}")))?
    };
    let mut stats_out = stats_file(&config.store_path, &config.worker_id)?;
    let mut loader: Option<BudgetedStore> = None;
    let mut shared: Option<(u32, Snapshot)> = None;
    let lease_ms = config.lease.as_millis() as u64;
    let started = Instant::now();
    let mut stats = WorkerStats {
        worker: config.worker_id.clone(),
        ..WorkerStats::default()
    };

    loop {
        store.expire_leases(store.now_ms())?;
        let Some(job) = store.claim_job(&config.worker_id, lease_ms)? else {
            break;
        };
        if config
            .crash_after_claims
            .is_some_and(|n| stats.jobs + stats.failed_jobs + 1 >= n as u64)
        {
            stats.crashed = true;
            break;
        }
        if loader.is_none() {
            loader = Some(BudgetedStore {
                store: ObservationStore::open(&inputs.observations)?,
                max_bytes: config.max_batch_memory,
            });
        }
        if shared.as_ref().map(|s| s.0) != Some(job.iteration) {
            let snap = read_snapshot(&shared_state_path(&config.store_path, job.iteration))?;
            shared = Some((job.iteration, snap));
        }
        let snap = &shared.as_ref().expect("loaded").1;
        let t0 = Instant::now();

        let (stop_tx, stop_rx) = mpsc::channel::<()>();
        let result = std::thread::scope(|scope| {
            let store = &store;
            let worker = config.worker_id.as_str();
            scope.spawn(move || {
                while let Err(mpsc::RecvTimeoutError::Timeout) =
                    stop_rx.recv_timeout(config.heartbeat)
                {
                    // a lost lease shows up when the job is completed
                    let _ = store.renew_lease(job.job_id, worker, lease_ms);
                }
            });
            let r = process_batch(
                job.job_id,
                job.iteration,
                job.kind,
                job.source_range,
                loader.as_ref().expect("loaded"),
                &snap.state,
                &snap.law,
                config.parallel_sources,
            );
            let _ = stop_tx.send(());
            r
        });

        let wall_s = t0.elapsed().as_secs_f64();
        let (outcome, n_obs) = match result {
            Ok(env) => {
                let n = env.stats.n_obs;
                match store.complete_job(job.job_id, &env)? {
                    Completion::Accepted => ("done".to_string(), n),
                    Completion::Duplicate => ("duplicate".to_string(), n),
                }
            }
            Err(BatchError::NonFinite { location, .. }) => {
                store.fail_job(
                    job.job_id,
                    &config.worker_id,
                    &format!("{NON_FINITE_FAILURE}: {location}"),
                )?;
                (format!("failed: non-finite input in {location}"), 0)
            }
            Err(BatchError::Solve(e)) => {
                store.fail_job(job.job_id, &config.worker_id, &e.to_string())?;
                (format!("failed: {e}"), 0)
            }
            Err(e @ BatchError::Format(FormatError::CorruptBlock { .. })) => {
                store.fail_job(job.job_id, &config.worker_id, &e.to_string())?;
                (format!("failed: {e}"), 0)
            }
            Err(e) => return Err(e),
        };
        if outcome.starts_with("failed") {
            stats.failed_jobs += 1;
        } else {
            stats.jobs += 1;
        }
        stats.n_obs += n_obs;
        stats.busy_s += wall_s;
        let record = JobRecord {
            worker: config.worker_id.clone(),
            job_id: job.job_id,
            iteration: job.iteration,
            kind: job.kind,
            n_sources: job.n_sources(),
            n_obs,
            wall_s,
            obs_per_hour: if wall_s > 0.0 {
                n_obs as f64 * 3600.0 / wall_s
            } else {
                0.0
            },
            outcome,
        };
        emit(&mut stats_out, config.echo, &record)?;
    }
    stats.wall_s = started.elapsed().as_secs_f64();
    stats.obs_per_hour = if stats.wall_s > 0.0 {
        stats.n_obs as f64 * 3600.0 / stats.wall_s
    } else {
        0.0
    };
    emit(&mut stats_out, config.echo, &stats)?;
    Ok(stats)
}

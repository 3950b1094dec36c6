//! Job stores: an in-memory table for single-process runs and a file-backed
//! table shared by worker processes.
//!
//! The file store keeps an append-only `jobs.log` of JSON records, each
//! holding the full new state of one job, and periodically folds the log into
//! `jobs.snapshot`. Every operation runs under an exclusive lock on `lock`,
//! replays the table, applies the change and appends it before unlocking.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{partition, Job, JobId, JobKind, JobState, PartialEnvelope, StoreError};
use crate::io::codec::hex;
use crate::model::SourceId;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
const STORE_FORMAT_VERSION: u32 = 1;
const COMPACT_AFTER_RECORDS: u64 = 4096;

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Clock advanced by hand, for tests.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(ms: u64) -> Self {
        ManualClock(AtomicU64::new(ms))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Accepted,
    /// Identical envelope already recorded; nothing changed.
    Duplicate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Expiry {
    pub requeued: Vec<JobId>,
    pub failed: Vec<JobId>,
}

pub trait JobStore: Send + Sync {
    /// Partition `ids` into jobs. Reposting the same batches returns the
    /// existing job ids.
    fn post_jobs(
        &self,
        iteration: u32,
        kind: JobKind,
        ids: &[SourceId],
        batch_size: usize,
    ) -> Result<Vec<JobId>, StoreError>;

    /// Claim the PENDING job with the lowest id.
    fn claim_job(&self, worker: &str, lease_ms: u64) -> Result<Option<Job>, StoreError>;

    fn renew_lease(&self, job_id: JobId, worker: &str, lease_ms: u64) -> Result<(), StoreError>;

    fn complete_job(
        &self,
        job_id: JobId,
        envelope: &PartialEnvelope,
    ) -> Result<Completion, StoreError>;

    /// Mark a claimed job permanently FAILED.
    fn fail_job(&self, job_id: JobId, worker: &str, reason: &str) -> Result<(), StoreError>;

    fn expire_leases(&self, now_ms: u64) -> Result<Expiry, StoreError>;

    fn jobs(&self) -> Result<Vec<Job>, StoreError>;

    fn envelope(&self, job: &Job) -> Result<PartialEnvelope, StoreError>;

    fn now_ms(&self) -> u64;
}

/// The state machine shared by both stores.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct JobTable {
    jobs: BTreeMap<JobId, Job>,
}

impl JobTable {
    fn get(&self, job_id: JobId) -> Result<&Job, StoreError> {
        self.jobs.get(&job_id).ok_or(StoreError::UnknownJob(job_id))
    }

    fn post(
        &self,
        iteration: u32,
        kind: JobKind,
        ids: &[SourceId],
        batch_size: usize,
    ) -> Result<(Vec<JobId>, Vec<Job>), StoreError> {
        if batch_size == 0 {
            return Err(StoreError::Invalid("batch_size must be at least 1".into()));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(StoreError::Invalid(
                "source ids must be strictly increasing".into(),
            ));
        }
        let mut next = self.jobs.keys().next_back().map_or(0, |k| k + 1);
        let mut ids_out = Vec::new();
        let mut new = Vec::new();
        for range in partition(ids, batch_size) {
            let existing = self
                .jobs
                .values()
                .find(|j| j.iteration == iteration && j.kind == kind && j.source_range == range);
            if let Some(j) = existing {
                ids_out.push(j.job_id);
                continue;
            }
            new.push(Job {
                job_id: next,
                iteration,
                kind,
                source_range: range,
                state: JobState::Pending,
                lease_expiry: None,
                attempts: 0,
                worker: None,
                envelope_checksum: None,
                failure: None,
            });
            ids_out.push(next);
            next += 1;
        }
        Ok((ids_out, new))
    }

    fn claim(&self, worker: &str, lease_ms: u64, now: u64) -> Result<Option<Job>, StoreError> {
        if lease_ms == 0 {
            return Err(StoreError::Invalid("lease must be positive".into()));
        }
        Ok(self
            .jobs
            .values()
            .find(|j| j.state == JobState::Pending)
            .map(|j| Job {
                state: JobState::Claimed,
                lease_expiry: Some(now + lease_ms),
                worker: Some(worker.to_string()),
                ..j.clone()
            }))
    }

    fn renew(
        &self,
        job_id: JobId,
        worker: &str,
        lease_ms: u64,
        now: u64,
    ) -> Result<Job, StoreError> {
        let j = self.get(job_id)?;
        if j.state != JobState::Claimed || j.worker.as_deref() != Some(worker) {
            return Err(StoreError::InvalidState {
                job_id,
                state: j.state,
                op: "renew lease",
            });
        }
        Ok(Job {
            lease_expiry: Some(now + lease_ms),
            ..j.clone()
        })
    }

    /// Validation for completion; `Ok(None)` is a duplicate.
    fn complete(&self, job_id: JobId, env: &PartialEnvelope) -> Result<Option<Job>, StoreError> {
        let j = self.get(job_id)?;
        if env.job_id != job_id || env.iteration != j.iteration {
            return Err(StoreError::Invalid(format!(
                "envelope for job {} iteration {} submitted to job {job_id} iteration {}",
                env.job_id, env.iteration, j.iteration
            )));
        }
        if let Some(location) = env.first_non_finite() {
            return Err(StoreError::FiniteCheckFailed { job_id, location });
        }
        if !env.checksum_valid() {
            return Err(StoreError::ChecksumMismatch { job_id });
        }
        let sum = hex(&env.checksum);
        match j.state {
            JobState::Claimed => Ok(Some(Job {
                state: JobState::Done,
                lease_expiry: None,
                envelope_checksum: Some(sum),
                ..j.clone()
            })),
            JobState::Done if j.envelope_checksum.as_deref() == Some(sum.as_str()) => Ok(None),
            JobState::Done => Err(StoreError::Conflict { job_id }),
            state => Err(StoreError::InvalidState {
                job_id,
                state,
                op: "complete",
            }),
        }
    }

    fn fail(&self, job_id: JobId, worker: &str, reason: &str) -> Result<Job, StoreError> {
        let j = self.get(job_id)?;
        if j.state != JobState::Claimed {
            return Err(StoreError::InvalidState {
                job_id,
                state: j.state,
                op: "fail",
            });
        }
        Ok(Job {
            state: JobState::Failed,
            lease_expiry: None,
            worker: Some(worker.to_string()),
            failure: Some(reason.to_string()),
            ..j.clone()
        })
    }

    fn expire(&self, now: u64, max_attempts: u32) -> (Expiry, Vec<Job>) {
        let mut out = Expiry::default();
        let mut changed = Vec::new();
        for j in self.jobs.values() {
            if j.state != JobState::Claimed || !j.lease_expiry.is_some_and(|e| e < now) {
                continue;
            }
            let attempts = j.attempts + 1;
            let failed = attempts >= max_attempts;
            if failed {
                out.failed.push(j.job_id);
            } else {
                out.requeued.push(j.job_id);
            }
            changed.push(Job {
                state: if failed {
                    JobState::Failed
                } else {
                    JobState::Pending
                },
                lease_expiry: None,
                attempts,
                worker: None,
                failure: failed.then(|| format!("lease expired {attempts} times")),
                ..j.clone()
            });
        }
        (out, changed)
    }

    fn apply(&mut self, job: Job) {
        self.jobs.insert(job.job_id, job);
    }
}

/// Job table held in memory; envelopes are kept alongside.
pub struct MemoryJobStore {
    inner: Mutex<(JobTable, BTreeMap<JobId, PartialEnvelope>)>,
    clock: Box<dyn Clock>,
    max_attempts: u32,
}

impl MemoryJobStore {
    pub fn new(clock: Box<dyn Clock>, max_attempts: u32) -> Self {
        MemoryJobStore {
            inner: Mutex::new(Default::default()),
            clock,
            max_attempts,
        }
    }
}

impl Default for MemoryJobStore {
    fn default() -> Self {
        Self::new(Box::new(SystemClock), DEFAULT_MAX_ATTEMPTS)
    }
}

impl JobStore for MemoryJobStore {
    fn post_jobs(
        &self,
        iteration: u32,
        kind: JobKind,
        ids: &[SourceId],
        batch_size: usize,
    ) -> Result<Vec<JobId>, StoreError> {
        let mut g = self.inner.lock().expect("store mutex");
        let (out, new) = g.0.post(iteration, kind, ids, batch_size)?;
        new.into_iter().for_each(|j| g.0.apply(j));
        Ok(out)
    }

    fn claim_job(&self, worker: &str, lease_ms: u64) -> Result<Option<Job>, StoreError> {
        let mut g = self.inner.lock().expect("store mutex");
        let j = g.0.claim(worker, lease_ms, self.clock.now_ms())?;
        if let Some(j) = &j {
            g.0.apply(j.clone());
        }
        Ok(j)
    }

    fn renew_lease(&self, job_id: JobId, worker: &str, lease_ms: u64) -> Result<(), StoreError> {
        let mut g = self.inner.lock().expect("store mutex");
        let j = g.0.renew(job_id, worker, lease_ms, self.clock.now_ms())?;
        g.0.apply(j);
        Ok(())
    }

    fn complete_job(
        &self,
        job_id: JobId,
        envelope: &PartialEnvelope,
    ) -> Result<Completion, StoreError> {
        let mut g = self.inner.lock().expect("store mutex");
        match g.0.complete(job_id, envelope)? {
            None => Ok(Completion::Duplicate),
            Some(j) => {
                g.0.apply(j);
                g.1.insert(job_id, envelope.clone());
                Ok(Completion::Accepted)
            }
        }
    }

    fn fail_job(&self, job_id: JobId, worker: &str, reason: &str) -> Result<(), StoreError> {
        let mut g = self.inner.lock().expect("store mutex");
        let j = g.0.fail(job_id, worker, reason)?;
        g.0.apply(j);
        Ok(())
    }

    fn expire_leases(&self, now_ms: u64) -> Result<Expiry, StoreError> {
        let mut g = self.inner.lock().expect("store mutex");
        let (out, changed) = g.0.expire(now_ms, self.max_attempts);
        changed.into_iter().for_each(|j| g.0.apply(j));
        Ok(out)
    }

    fn jobs(&self) -> Result<Vec<Job>, StoreError> {
        Ok(self
            .inner
            .lock()
            .expect("store mutex")
            .0
            .jobs
            .values()
            .cloned()
            .collect())
    }

    fn envelope(&self, job: &Job) -> Result<PartialEnvelope, StoreError> {
        let g = self.inner.lock().expect("store mutex");
        g.1.get(&job.job_id)
            .cloned()
            .ok_or_else(|| StoreError::InvalidState {
                job_id: job.job_id,
                state: job.state,
                op: "read envelope",
            })
    }

    fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreMeta {
    format_version: u32,
    max_attempts: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRecord {
    seq: u64,
    job: Job,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Snapshot {
    /// Highest log sequence number folded in.
    seq: u64,
    table: JobTable,
}

/// Job table in a directory, shared between processes.
pub struct FileJobStore {
    root: PathBuf,
    meta: StoreMeta,
    clock: Box<dyn Clock>,
}

struct Loaded {
    table: JobTable,
    seq: u64,
    records_since_snapshot: u64,
}

impl FileJobStore {
    /// Create an empty store, or open it if it exists with the same settings.
    pub fn create(
        root: &Path,
        max_attempts: u32,
        clock: Box<dyn Clock>,
    ) -> Result<Self, StoreError> {
        if max_attempts == 0 {
            return Err(StoreError::Invalid(
                "max_attempts must be at least 1".into(),
            ));
        }
        fs::create_dir_all(root.join("envelopes"))?;
        let meta_path = root.join("store.json");
        if !meta_path.exists() {
            let meta = StoreMeta {
                format_version: STORE_FORMAT_VERSION,
                max_attempts,
            };
            write_atomic(
                &meta_path,
                serde_json::to_string_pretty(&meta)
                    .expect("meta")
                    .as_bytes(),
            )?;
        }
        Self::open(root, clock)
    }

    pub fn open(root: &Path, clock: Box<dyn Clock>) -> Result<Self, StoreError> {
        let text = fs::read_to_string(root.join("store.json"))?;
        let meta: StoreMeta = serde_json::from_str(&text)
            .map_err(|e| StoreError::Corrupt(format!("store.json: {e}")))?;
        if meta.format_version != STORE_FORMAT_VERSION {
            return Err(StoreError::Corrupt(format!(
                "store format version {} (expected {STORE_FORMAT_VERSION})",
                meta.format_version
            )));
        }
        Ok(FileJobStore {
            root: root.to_path_buf(),
            meta,
            clock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn envelope_path(&self, iteration: u32, job_id: JobId) -> PathBuf {
        self.root
            .join("envelopes")
            .join(iteration.to_string())
            .join(job_id.to_string())
    }

    /// Run `f` on the current table under the exclusive lock and append the
    /// jobs it returns.
    fn transact<T>(
        &self,
        f: impl FnOnce(&JobTable) -> Result<(T, Vec<Job>), StoreError>,
    ) -> Result<T, StoreError> {
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.root.join("lock"))?;
        lock.lock()?;
        let result = (|| {
            let loaded = self.load()?;
            let (value, changed) = f(&loaded.table)?;
            if !changed.is_empty() {
                self.append(loaded.seq, &changed)?;
                if loaded.records_since_snapshot + changed.len() as u64 >= COMPACT_AFTER_RECORDS {
                    let seq = loaded.seq + changed.len() as u64;
                    let mut table = loaded.table;
                    changed.into_iter().for_each(|j| table.apply(j));
                    self.compact(table, seq)?;
                }
            }
            Ok(value)
        })();
        lock.unlock()?;
        result
    }

    fn load(&self) -> Result<Loaded, StoreError> {
        let snap_path = self.root.join("jobs.snapshot");
        let snapshot: Snapshot = match fs::read_to_string(&snap_path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| StoreError::Corrupt(format!("jobs.snapshot: {e}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Snapshot::default(),
            Err(e) => return Err(e.into()),
        };
        let mut loaded = Loaded {
            table: snapshot.table,
            seq: snapshot.seq,
            records_since_snapshot: 0,
        };
        let file = match File::open(self.root.join("jobs.log")) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(loaded),
            Err(e) => return Err(e.into()),
        };
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = match serde_json::from_str(line) {
                Ok(r) => r,
                // a torn final line from a writer that died mid-append
                Err(_) if i + 1 == lines.len() => break,
                Err(e) => return Err(StoreError::Corrupt(format!("jobs.log line {}: {e}", i + 1))),
            };
            if rec.seq <= snapshot.seq {
                continue;
            }
            loaded.seq = loaded.seq.max(rec.seq);
            loaded.records_since_snapshot += 1;
            loaded.table.apply(rec.job);
        }
        Ok(loaded)
    }

    fn append(&self, seq: u64, jobs: &[Job]) -> Result<(), StoreError> {
        let path = self.root.join("jobs.log");
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        // drop a torn tail left by a writer that died mid-append
        let len = file.metadata()?.len();
        if len > 0 {
            let bytes = fs::read(&path)?;
            if bytes.last() != Some(&b'\n') {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                file.set_len(keep as u64)?;
            }
        }
        let mut text = String::new();
        for (k, job) in jobs.iter().enumerate() {
            let rec = LogRecord {
                seq: seq + 1 + k as u64,
                job: job.clone(),
            };
            text.push_str(&serde_json::to_string(&rec).expect("log record"));
            text.push('\n');
        }
        file.write_all(text.as_bytes())?;
        file.sync_data()?;
        Ok(())
    }

    /// Fold the table into the snapshot and empty the log. Records with
    /// `seq` at or below the snapshot's are skipped on replay, so a crash
    /// between the two steps is harmless.
    fn compact(&self, table: JobTable, seq: u64) -> Result<(), StoreError> {
        let snap = Snapshot { seq, table };
        write_atomic(
            &self.root.join("jobs.snapshot"),
            serde_json::to_string(&snap).expect("snapshot").as_bytes(),
        )?;
        File::create(self.root.join("jobs.log"))?.sync_all()?;
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl JobStore for FileJobStore {
    fn post_jobs(
        &self,
        iteration: u32,
        kind: JobKind,
        ids: &[SourceId],
        batch_size: usize,
    ) -> Result<Vec<JobId>, StoreError> {
        self.transact(|t| t.post(iteration, kind, ids, batch_size))
    }

    fn claim_job(&self, worker: &str, lease_ms: u64) -> Result<Option<Job>, StoreError> {
        let now = self.clock.now_ms();
        self.transact(|t| {
            let j = t.claim(worker, lease_ms, now)?;
            let changed = j.iter().cloned().collect();
            Ok((j, changed))
        })
    }

    fn renew_lease(&self, job_id: JobId, worker: &str, lease_ms: u64) -> Result<(), StoreError> {
        let now = self.clock.now_ms();
        self.transact(|t| Ok(((), vec![t.renew(job_id, worker, lease_ms, now)?])))
    }

    fn complete_job(
        &self,
        job_id: JobId,
        envelope: &PartialEnvelope,
    ) -> Result<Completion, StoreError> {
        self.transact(|t| match t.complete(job_id, envelope)? {
            None => Ok((Completion::Duplicate, vec![])),
            Some(j) => {
                let path = self.envelope_path(j.iteration, job_id);
                fs::create_dir_all(path.parent().expect("envelope dir"))?;
                write_atomic(&path, &envelope.encode())?;
                Ok((Completion::Accepted, vec![j]))
            }
        })
    }

    fn fail_job(&self, job_id: JobId, worker: &str, reason: &str) -> Result<(), StoreError> {
        self.transact(|t| Ok(((), vec![t.fail(job_id, worker, reason)?])))
    }

    fn expire_leases(&self, now_ms: u64) -> Result<Expiry, StoreError> {
        let max = self.meta.max_attempts;
        self.transact(|t| Ok(t.expire(now_ms, max)))
    }

    fn jobs(&self) -> Result<Vec<Job>, StoreError> {
        self.transact(|t| Ok((t.jobs.values().cloned().collect(), vec![])))
    }

    fn envelope(&self, job: &Job) -> Result<PartialEnvelope, StoreError> {
        if job.state != JobState::Done {
            return Err(StoreError::InvalidState {
                job_id: job.job_id,
                state: job.state,
                op: "read envelope",
            });
        }
        let bytes = fs::read(self.envelope_path(job.iteration, job.job_id))?;
        let env = PartialEnvelope::decode(&bytes)?;
        if env.job_id != job.job_id
            || job.envelope_checksum.as_deref() != Some(hex(&env.checksum).as_str())
        {
            return Err(StoreError::ChecksumMismatch { job_id: job.job_id });
        }
        Ok(env)
    }

    fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::BlockPartials;
    use crate::whiteboard::BatchStats;
    use std::sync::Arc;

    fn env(job_id: JobId, iteration: u32, x: f64) -> PartialEnvelope {
        let mut p = BlockPartials::zeros(3, 2);
        p.attitude.matrix[0] = x;
        PartialEnvelope::new(job_id, iteration, p, BatchStats::default(), vec![])
    }

    struct SharedClock(Arc<ManualClock>);
    impl Clock for SharedClock {
        fn now_ms(&self) -> u64 {
            self.0.now_ms()
        }
    }

    fn stores(dir: &Path) -> (Vec<Box<dyn JobStore>>, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(1_000));
        let mem = MemoryJobStore::new(Box::new(SharedClock(clock.clone())), 3);
        let file = FileJobStore::create(dir, 3, Box::new(SharedClock(clock.clone()))).unwrap();
        (vec![Box::new(mem), Box::new(file)], clock)
    }

    #[test]
    fn post_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let (stores, _) = stores(dir.path());
        let ids: Vec<u64> = (0..10_000).collect();
        for s in &stores {
            let a = s.post_jobs(0, JobKind::SourceUpdate, &ids, 3000).unwrap();
            assert_eq!(a, vec![0, 1, 2, 3]);
            assert_eq!(
                s.post_jobs(0, JobKind::SourceUpdate, &ids, 3000).unwrap(),
                a
            );
            assert!(s
                .post_jobs(0, JobKind::SourceUpdate, &[], 3000)
                .unwrap()
                .is_empty());
            assert_eq!(s.jobs().unwrap().len(), 4);
            let b = s.post_jobs(1, JobKind::SourceUpdate, &ids, 3000).unwrap();
            assert_eq!(b, vec![4, 5, 6, 7]);
            assert!(s.post_jobs(2, JobKind::SourceUpdate, &ids, 0).is_err());
        }
    }

    #[test]
    fn lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        let (stores, clock) = stores(dir.path());
        for s in &stores {
            s.post_jobs(0, JobKind::SourceUpdate, &[0, 1, 2, 3], 2)
                .unwrap();
            // completion of a PENDING job
            assert!(matches!(
                s.complete_job(0, &env(0, 0, 1.0)),
                Err(StoreError::InvalidState {
                    state: JobState::Pending,
                    ..
                })
            ));
            let j = s.claim_job("w1", 100).unwrap().unwrap();
            assert_eq!(
                (j.job_id, j.state, j.lease_expiry),
                (0, JobState::Claimed, Some(clock.now_ms() + 100))
            );
            assert_eq!(s.claim_job("w2", 100).unwrap().unwrap().job_id, 1);
            assert!(s.claim_job("w3", 100).unwrap().is_none());

            let mut bad = env(0, 0, f64::NAN);
            match s.complete_job(0, &bad) {
                Err(StoreError::FiniteCheckFailed {
                    job_id: 0,
                    location,
                }) => {
                    assert_eq!(location, "ATTITUDE MATRIX ENTRY 0")
                }
                other => panic!("{other:?}"),
            }
            bad = env(0, 0, 1.0);
            bad.checksum[0] ^= 1;
            assert!(matches!(
                s.complete_job(0, &bad),
                Err(StoreError::ChecksumMismatch { job_id: 0 })
            ));

            assert_eq!(
                s.complete_job(0, &env(0, 0, 1.0)).unwrap(),
                Completion::Accepted
            );
            let before = s.jobs().unwrap();
            assert_eq!(
                s.complete_job(0, &env(0, 0, 1.0)).unwrap(),
                Completion::Duplicate
            );
            assert_eq!(s.jobs().unwrap(), before);
            assert!(matches!(
                s.complete_job(0, &env(0, 0, 2.0)),
                Err(StoreError::Conflict { job_id: 0 })
            ));
            let done = s
                .jobs()
                .unwrap()
                .into_iter()
                .find(|j| j.job_id == 0)
                .unwrap();
            assert_eq!(s.envelope(&done).unwrap(), env(0, 0, 1.0));

            assert!(s.expire_leases(clock.now_ms()).unwrap().requeued.is_empty());
            clock.advance(1_000);
        }
    }

    #[test]
    fn expiry_requeues_then_fails() {
        let dir = tempfile::tempdir().unwrap();
        let (stores, clock) = stores(dir.path());
        for s in &stores {
            let base = s.jobs().unwrap().len() as u64;
            s.post_jobs(9, JobKind::SourceUpdate, &[0], 1).unwrap();
            for attempt in 1..=3u32 {
                let j = s.claim_job("w", 10).unwrap().unwrap();
                assert_eq!(j.job_id, base);
                assert!(s
                    .expire_leases(clock.now_ms() + 10)
                    .unwrap()
                    .requeued
                    .is_empty());
                let e = s.expire_leases(clock.now_ms() + 11).unwrap();
                let j = s
                    .jobs()
                    .unwrap()
                    .into_iter()
                    .find(|j| j.job_id == base)
                    .unwrap();
                assert_eq!(j.attempts, attempt);
                if attempt < 3 {
                    assert_eq!(e.requeued, vec![base]);
                    assert_eq!(j.state, JobState::Pending);
                } else {
                    assert_eq!(e.failed, vec![base]);
                    assert_eq!(j.state, JobState::Failed);
                }
            }
            assert!(s.claim_job("w", 10).unwrap().is_none());
        }
    }

    #[test]
    fn renew_and_fail() {
        let s = MemoryJobStore::new(Box::new(ManualClock::new(0)), 3);
        s.post_jobs(0, JobKind::SecondaryUpdate, &[5, 6], 2)
            .unwrap();
        let j = s.claim_job("a", 10).unwrap().unwrap();
        assert!(s.renew_lease(j.job_id, "b", 10).is_err());
        s.renew_lease(j.job_id, "a", 50).unwrap();
        assert!(s.expire_leases(20).unwrap().requeued.is_empty());
        s.fail_job(j.job_id, "a", "bad input").unwrap();
        let j = &s.jobs().unwrap()[0];
        assert_eq!(
            (j.state, j.failure.as_deref()),
            (JobState::Failed, Some("bad input"))
        );
        assert!(s.fail_job(j.job_id, "a", "again").is_err());
    }

    #[test]
    fn file_store_survives_torn_line_and_compaction() {
        let dir = tempfile::tempdir().unwrap();
        let s = FileJobStore::create(dir.path(), 3, Box::new(ManualClock::new(0))).unwrap();
        s.post_jobs(0, JobKind::SourceUpdate, &[0, 1, 2], 1)
            .unwrap();
        let mut f = OpenOptions::new()
            .append(true)
            .open(dir.path().join("jobs.log"))
            .unwrap();
        f.write_all(b"{\"seq\":99,\"job\":{\"jo").unwrap();
        drop(f);
        assert_eq!(s.jobs().unwrap().len(), 3);
        assert_eq!(s.claim_job("w", 5).unwrap().unwrap().job_id, 0);
        let reopened = FileJobStore::open(dir.path(), Box::new(ManualClock::new(0))).unwrap();
        assert_eq!(reopened.jobs().unwrap()[0].state, JobState::Claimed);

        let loaded = s.load().unwrap();
        s.compact(loaded.table, loaded.seq).unwrap();
        assert_eq!(fs::read(dir.path().join("jobs.log")).unwrap().len(), 0);
        let jobs = reopened.jobs().unwrap();
        assert_eq!((jobs.len(), jobs[0].state), (3, JobState::Claimed));
        assert_eq!(reopened.claim_job("w", 5).unwrap().unwrap().job_id, 1);
        assert_eq!(s.jobs().unwrap()[1].state, JobState::Claimed);
    }

    #[test]
    fn missing_store_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(FileJobStore::open(&dir.path().join("nope"), Box::new(SystemClock)).is_err());
    }

    #[test]
    fn concurrent_claims_are_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let s = FileJobStore::create(dir.path(), 3, Box::new(SystemClock)).unwrap();
        s.post_jobs(0, JobKind::SourceUpdate, &[0], 1).unwrap();
        let got: Vec<bool> = std::thread::scope(|sc| {
            let hs: Vec<_> = (0..4)
                .map(|i| {
                    let p = dir.path().to_path_buf();
                    sc.spawn(move || {
                        let st = FileJobStore::open(&p, Box::new(SystemClock)).unwrap();
                        st.claim_job(&format!("w{i}"), 60_000).unwrap().is_some()
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(got.iter().filter(|&&b| b).count(), 1);
    }
}

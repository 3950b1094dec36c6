//! Persistent job table with leases, idempotent completion and a
//! deterministic merge of the partial normal equations.

mod envelope;
mod job;
mod merge;
mod store;

pub use envelope::{BatchStats, PartialEnvelope, SourceResult, SourceStatus, ENVELOPE_VERSION};
pub use job::{partition, Job, JobId, JobKind, JobState};
pub use merge::{merge_partials, MergedIteration};
pub use store::{
    Clock, Completion, Expiry, FileJobStore, JobStore, ManualClock, MemoryJobStore, SystemClock,
    DEFAULT_MAX_ATTEMPTS,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("finite check failed for job {job_id}: non-finite value in {location}")]
    FiniteCheckFailed { job_id: JobId, location: String },
    #[error("checksum mismatch for job {job_id}")]
    ChecksumMismatch { job_id: JobId },
    #[error("job {job_id} is {state:?}; cannot {op}")]
    InvalidState {
        job_id: JobId,
        state: JobState,
        op: &'static str,
    },
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {job_id} already completed with a different envelope")]
    Conflict { job_id: JobId },
    #[error("invalid request: {0}")]
    Invalid(String),
}

//! Worker runtime: claim a job, load its observation block, update the
//! sources, accumulate the block normal equations and post the envelope.

mod batch;
mod worker;

pub use batch::{process_batch, BlockLoader, BudgetedStore, MemoryObservations};
pub use worker::{
    prepare_store, run_datatrain, shared_state_path, JobRecord, WorkerConfig, WorkerInputs,
    WorkerStats, NON_FINITE_FAILURE,
};

use thiserror::Error;

use crate::io::FormatError;
use crate::solver::SolveError;
use crate::whiteboard::{JobId, StoreError};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("job {job_id}: non-finite input in {location}")]
    NonFinite { job_id: JobId, location: String },
    #[error(transparent)]
    Solve(SolveError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<BatchError> for SolveError {
    fn from(e: BatchError) -> Self {
        match e {
            BatchError::NonFinite { job_id, location } => {
                SolveError::Store(StoreError::FiniteCheckFailed { job_id, location })
            }
            BatchError::Solve(e) => e,
            BatchError::Store(e) => SolveError::Store(e),
            BatchError::Format(e) => SolveError::Executor(e.to_string()),
        }
    }
}

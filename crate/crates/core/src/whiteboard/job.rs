use serde::{Deserialize, Serialize};

use crate::model::SourceId;

pub type JobId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobKind {
    SourceUpdate,
    SecondaryUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    Pending,
    Claimed,
    Done,
    Failed,
}

/// One batch of contiguous source ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: JobId,
    pub iteration: u32,
    pub kind: JobKind,
    /// Half-open `[start, end)`.
    pub source_range: (SourceId, SourceId),
    pub state: JobState,
    /// Wall-clock milliseconds since the Unix epoch.
    pub lease_expiry: Option<u64>,
    pub attempts: u32,
    pub worker: Option<String>,
    /// Hex SHA-256 of the accepted envelope.
    pub envelope_checksum: Option<String>,
    pub failure: Option<String>,
}

impl Job {
    pub fn n_sources(&self) -> u64 {
        self.source_range.1 - self.source_range.0
    }
}

/// Contiguous batches of at most `batch_size` ids from a sorted id list.
/// A batch never spans a gap in the ids.
pub fn partition(ids: &[SourceId], batch_size: usize) -> Vec<(SourceId, SourceId)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        let start = ids[i];
        let mut j = i + 1;
        while j < ids.len() && j - i < batch_size && ids[j] == ids[j - 1] + 1 {
            j += 1;
        }
        out.push((start, ids[j - 1] + 1));
        i = j;
    }
    out
}

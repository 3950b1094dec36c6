//! File formats: text catalogs, the binary observation store and binary
//! solver snapshots.

mod catalog;
pub mod codec;
mod obs_store;
mod snapshot;

pub use catalog::{read_catalog, write_catalog, CATALOG_HEADER};
pub use obs_store::{
    write_observation_store, IndexEntry, ObservationStore, OBS_HEADER_BYTES, OBS_RECORD_BYTES,
};
pub use snapshot::{
    decode_state, encode_state, read_snapshot, write_snapshot, Snapshot, SNAPSHOT_VERSION,
};

use thiserror::Error;

use crate::model::SourceId;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("observation block of source {source_id} fails its checksum")]
    CorruptBlock { source_id: SourceId },
    #[error("catalog line {line}: {detail}")]
    Catalog { line: usize, detail: String },
}

/// Write to a sibling temporary file and rename over `path`.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

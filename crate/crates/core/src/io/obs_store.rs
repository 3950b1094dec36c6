//! Observation store sorted by source id.
//!
//! `observations.bin`: a 64-byte header (`b"AGOBS\0\0\0"`, version `u32`,
//! record size `u32`, record count `u64`, source count `u64`, zero padding)
//! followed by 48-byte records `(source_id u64, t f64, abscissa f64,
//! sigma f64, fov u32, calib_unit u32, reserved u64)`.
//!
//! `observations.idx`: `b"AGIDX\0\0\0"`, version `u32`, padding `u32`,
//! source count `u64`, then per source id `(first record u64, count u64,
//! first 8 bytes of the SHA-256 of its records)`.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use super::codec::{sha256, Decoder, Encoder};
use super::{write_atomic, FormatError};
use crate::model::{Fov, Observation, SourceId};

pub const OBS_HEADER_BYTES: usize = 64;
pub const OBS_RECORD_BYTES: usize = 48;
const OBS_MAGIC: &[u8; 8] = b"AGOBS\0\0\0";
const IDX_MAGIC: &[u8; 8] = b"AGIDX\0\0\0";
const OBS_VERSION: u32 = 1;
const IDX_ENTRY_BYTES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub first: u64,
    pub count: u64,
    pub checksum: [u8; 8],
}

fn encode_record(e: &mut Encoder, o: &Observation) {
    e.u64(o.source_id)
        .f64(o.t)
        .f64(o.abscissa_obs)
        .f64(o.sigma)
        .u32(o.fov.index() as u32)
        .u32(o.calib_unit as u32)
        .u64(0);
}

fn block_checksum(bytes: &[u8]) -> [u8; 8] {
    let mut out = [0u8; 8];
    out.copy_from_slice(&sha256(bytes)[..8]);
    out
}

/// Write the store for sources `0..n_sources`. `obs` must be sorted by
/// (source id, time).
pub fn write_observation_store(
    dir: &Path,
    obs: &[Observation],
    n_sources: u64,
) -> Result<(), FormatError> {
    let corrupt = |detail: String| FormatError::Corrupt {
        path: dir.display().to_string(),
        detail,
    };
    if obs
        .windows(2)
        .any(|w| (w[0].source_id, w[0].t) > (w[1].source_id, w[1].t))
    {
        return Err(corrupt(
            "observations are not sorted by (source id, time)".into(),
        ));
    }
    if obs.last().is_some_and(|o| o.source_id >= n_sources) {
        return Err(corrupt("observation source id outside the catalog".into()));
    }
    let mut body = Encoder::new();
    body.bytes(OBS_MAGIC)
        .u32(OBS_VERSION)
        .u32(OBS_RECORD_BYTES as u32)
        .u64(obs.len() as u64)
        .u64(n_sources)
        .bytes(&[0u8; OBS_HEADER_BYTES - 32]);
    for o in obs {
        encode_record(&mut body, o);
    }

    let mut idx = Encoder::new();
    idx.bytes(IDX_MAGIC).u32(OBS_VERSION).u32(0).u64(n_sources);
    let mut k = 0usize;
    for id in 0..n_sources {
        let first = k;
        while k < obs.len() && obs[k].source_id == id {
            k += 1;
        }
        let lo = OBS_HEADER_BYTES + first * OBS_RECORD_BYTES;
        let hi = OBS_HEADER_BYTES + k * OBS_RECORD_BYTES;
        idx.u64(first as u64)
            .u64((k - first) as u64)
            .bytes(&block_checksum(&body.buf[lo..hi]));
    }
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("observations.bin"), &body.buf)?;
    write_atomic(&dir.join("observations.idx"), &idx.buf)?;
    Ok(())
}

/// Read side: the index is held in memory, observation blocks are read on
/// demand with one seek per range.
#[derive(Debug, Clone)]
pub struct ObservationStore {
    path: PathBuf,
    index: Vec<IndexEntry>,
    n_records: u64,
}

impl ObservationStore {
    pub fn open(dir: &Path) -> Result<Self, FormatError> {
        let path = dir.join("observations.bin");
        let idx_path = dir.join("observations.idx");
        let corrupt = |p: &Path, detail: &str| FormatError::Corrupt {
            path: p.display().to_string(),
            detail: detail.to_string(),
        };

        let mut header = [0u8; OBS_HEADER_BYTES];
        let mut f = File::open(&path)?;
        f.read_exact(&mut header)
            .map_err(|_| corrupt(&path, "short header"))?;
        let mut d = Decoder::new(&header);
        let bad_header = || corrupt(&path, "bad header");
        if d.take(8).map_err(|_| bad_header())? != OBS_MAGIC {
            return Err(corrupt(&path, "bad magic"));
        }
        let version = d.u32().map_err(|_| bad_header())?;
        let rec = d.u32().map_err(|_| bad_header())?;
        let n_records = d.u64().map_err(|_| bad_header())?;
        let n_sources = d.u64().map_err(|_| bad_header())?;
        if version != OBS_VERSION || rec as usize != OBS_RECORD_BYTES {
            return Err(corrupt(
                &path,
                &format!("unsupported version {version} / record size {rec}"),
            ));
        }
        let expected = OBS_HEADER_BYTES as u64 + n_records * OBS_RECORD_BYTES as u64;
        if f.metadata()?.len() != expected {
            return Err(corrupt(
                &path,
                "file length does not match the record count",
            ));
        }

        let idx = std::fs::read(&idx_path)?;
        let mut d = Decoder::new(&idx);
        let bad_idx = || corrupt(&idx_path, "truncated index");
        if d.take(8).map_err(|_| bad_idx())? != IDX_MAGIC {
            return Err(corrupt(&idx_path, "bad magic"));
        }
        if d.u32().map_err(|_| bad_idx())? != OBS_VERSION {
            return Err(corrupt(&idx_path, "unsupported version"));
        }
        d.u32().map_err(|_| bad_idx())?;
        if d.u64().map_err(|_| bad_idx())? != n_sources
            || d.remaining() != n_sources as usize * IDX_ENTRY_BYTES
        {
            return Err(corrupt(
                &idx_path,
                "source count does not match the observation file",
            ));
        }
        let mut index = Vec::with_capacity(n_sources as usize);
        let mut next = 0u64;
        for _ in 0..n_sources {
            let first = d.u64().map_err(|_| bad_idx())?;
            let count = d.u64().map_err(|_| bad_idx())?;
            let mut checksum = [0u8; 8];
            checksum.copy_from_slice(d.take(8).map_err(|_| bad_idx())?);
            if first != next {
                return Err(corrupt(&idx_path, "index entries are not contiguous"));
            }
            next = first + count;
            index.push(IndexEntry {
                first,
                count,
                checksum,
            });
        }
        if next != n_records {
            return Err(corrupt(&idx_path, "index does not cover every record"));
        }
        Ok(ObservationStore {
            path,
            index,
            n_records,
        })
    }

    pub fn n_sources(&self) -> u64 {
        self.index.len() as u64
    }

    pub fn n_records(&self) -> u64 {
        self.n_records
    }

    pub fn entry(&self, id: SourceId) -> Option<&IndexEntry> {
        self.index.get(id as usize)
    }

    fn check_range(&self, (start, end): (SourceId, SourceId)) -> Result<(), FormatError> {
        if start > end || end > self.n_sources() {
            return Err(FormatError::Corrupt {
                path: self.path.display().to_string(),
                detail: format!("source range [{start}, {end}) outside the store"),
            });
        }
        Ok(())
    }

    /// Bytes of observation data in `[start, end)`.
    pub fn range_bytes(&self, range: (SourceId, SourceId)) -> u64 {
        (range.0..range.1)
            .map(|id| self.index[id as usize].count * OBS_RECORD_BYTES as u64)
            .sum()
    }

    /// Split a range into consecutive sub-ranges holding at most `max_bytes`
    /// of observations each. A single source larger than the budget gets a
    /// sub-range of its own.
    pub fn split_range(
        &self,
        range: (SourceId, SourceId),
        max_bytes: u64,
    ) -> Result<Vec<(SourceId, SourceId)>, FormatError> {
        self.check_range(range)?;
        let mut out = Vec::new();
        let mut start = range.0;
        let mut bytes = 0u64;
        for id in range.0..range.1 {
            let b = self.index[id as usize].count * OBS_RECORD_BYTES as u64;
            if id > start && bytes + b > max_bytes {
                out.push((start, id));
                start = id;
                bytes = 0;
            }
            bytes += b;
        }
        if range.1 > start {
            out.push((start, range.1));
        }
        Ok(out)
    }

    /// All observations of `[start, end)` in one read, grouped by source in
    /// ascending id; sources without observations give empty groups.
    pub fn read_range(
        &self,
        range: (SourceId, SourceId),
    ) -> Result<Vec<(SourceId, Vec<Observation>)>, FormatError> {
        self.check_range(range)?;
        if range.0 == range.1 {
            return Ok(Vec::new());
        }
        let first = self.index[range.0 as usize].first;
        let last = self.index[range.1 as usize - 1];
        let n = (last.first + last.count - first) as usize;
        let mut buf = vec![0u8; n * OBS_RECORD_BYTES];
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(
            OBS_HEADER_BYTES as u64 + first * OBS_RECORD_BYTES as u64,
        ))?;
        f.read_exact(&mut buf)?;

        let mut out = Vec::with_capacity((range.1 - range.0) as usize);
        for id in range.0..range.1 {
            let e = self.index[id as usize];
            let lo = ((e.first - first) as usize) * OBS_RECORD_BYTES;
            let hi = lo + e.count as usize * OBS_RECORD_BYTES;
            let block = &buf[lo..hi];
            if block_checksum(block) != e.checksum {
                return Err(FormatError::CorruptBlock { source_id: id });
            }
            let mut d = Decoder::new(block);
            let mut obs = Vec::with_capacity(e.count as usize);
            let bad = || FormatError::CorruptBlock { source_id: id };
            for _ in 0..e.count {
                let source_id = d.u64().map_err(|_| bad())?;
                let t = d.f64().map_err(|_| bad())?;
                let abscissa_obs = d.f64().map_err(|_| bad())?;
                let sigma = d.f64().map_err(|_| bad())?;
                let fov = Fov::from_index(d.u32().map_err(|_| bad())?).ok_or_else(bad)?;
                let calib_unit = u16::try_from(d.u32().map_err(|_| bad())?).map_err(|_| bad())?;
                d.u64().map_err(|_| bad())?;
                if source_id != id {
                    return Err(bad());
                }
                obs.push(Observation {
                    source_id,
                    t,
                    fov,
                    calib_unit,
                    abscissa_obs,
                    sigma,
                });
            }
            out.push((id, obs));
        }
        Ok(out)
    }
}

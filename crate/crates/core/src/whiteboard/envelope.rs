//! Result payload of one job and its binary encoding.
//!
//! Layout (little-endian): `b"AGENV\0\0\0"`, format version `u32`, job id
//! `u64`, iteration `u32`, three block accumulators, residual sums, batch
//! statistics, per-source results, then the SHA-256 of everything before it.

use nalgebra::Matrix5;
use serde::{Deserialize, Serialize};

use super::{JobId, StoreError};
use crate::io::codec::{sha256, DecodeError, Decoder, Encoder};
use crate::model::{SourceId, SourceParams};
use crate::solver::{BlockKind, BlockPartials, CrossTerms, PartialNormalEquations};

pub const ENVELOPE_MAGIC: &[u8; 8] = b"AGENV\0\0\0";
pub const ENVELOPE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceStatus {
    Updated,
    Underdetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceResult {
    pub source_id: SourceId,
    pub status: SourceStatus,
    pub n_obs: u32,
    pub params: SourceParams,
    /// Upper triangle of the 5×5 covariance, row major (15 values).
    pub covariance: [f64; 15],
    pub chi2_before: f64,
    pub max_update: f64,
}

impl SourceResult {
    pub fn covariance_matrix(&self) -> Matrix5<f64> {
        let mut m = Matrix5::zeros();
        let mut k = 0;
        for i in 0..5 {
            for j in i..5 {
                m[(i, j)] = self.covariance[k];
                m[(j, i)] = self.covariance[k];
                k += 1;
            }
        }
        m
    }

    pub fn pack_covariance(m: &Matrix5<f64>) -> [f64; 15] {
        let mut out = [0.0; 15];
        let mut k = 0;
        for i in 0..5 {
            for j in i..5 {
                out[k] = m[(i, j)];
                k += 1;
            }
        }
        out
    }

    /// Formal standard errors in rad-equivalents.
    pub fn formal_errors(&self) -> [f64; 5] {
        let m = self.covariance_matrix();
        std::array::from_fn(|i| m[(i, i)].max(0.0).sqrt())
    }
}

/// Deterministic summary of a batch; wall times live in worker statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub n_sources: u64,
    pub n_obs: u64,
    pub n_underdetermined: u64,
    /// Σ χ² at the starting parameters of the updated sources.
    pub chi2_before: f64,
    pub max_source_update: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialEnvelope {
    pub job_id: JobId,
    pub iteration: u32,
    pub partials: BlockPartials,
    pub stats: BatchStats,
    pub source_results: Vec<SourceResult>,
    pub checksum: [u8; 32],
}

impl PartialEnvelope {
    pub fn new(
        job_id: JobId,
        iteration: u32,
        partials: BlockPartials,
        stats: BatchStats,
        source_results: Vec<SourceResult>,
    ) -> Self {
        let mut env = PartialEnvelope {
            job_id,
            iteration,
            partials,
            stats,
            source_results,
            checksum: [0; 32],
        };
        env.checksum = sha256(&env.payload());
        env
    }

    fn payload(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(ENVELOPE_MAGIC)
            .u32(ENVELOPE_VERSION)
            .u64(self.job_id)
            .u32(self.iteration);
        for block in self.partials.blocks() {
            e.u8(block.kind.code())
                .u64(block.n as u64)
                .u64(block.bandwidth as u64)
                .u64(block.n_obs)
                .f64s(&block.matrix)
                .f64s(&block.rhs);
        }
        let x = &self.partials.cross;
        e.u64(x.n_knots as u64)
            .u64(x.n_units as u64)
            .f64s(&x.ac)
            .f64s(&x.ag)
            .f64s(&x.cg);
        e.f64(self.partials.chi2).f64(self.partials.sum_sq_residual);
        let s = &self.stats;
        e.u64(s.n_sources)
            .u64(s.n_obs)
            .u64(s.n_underdetermined)
            .f64(s.chi2_before)
            .f64(s.max_source_update);
        e.u64(self.source_results.len() as u64);
        for r in &self.source_results {
            let p = &r.params;
            e.u64(r.source_id)
                .u8(match r.status {
                    SourceStatus::Updated => 0,
                    SourceStatus::Underdetermined => 1,
                })
                .u32(r.n_obs);
            for x in [
                p.alpha,
                p.delta,
                p.parallax,
                p.pm_alpha_star,
                p.pm_delta,
                p.radial_velocity,
                p.epoch,
            ] {
                e.f64(x);
            }
            for x in r.covariance {
                e.f64(x);
            }
            e.f64(r.chi2_before).f64(r.max_update);
        }
        e.buf
    }

    pub fn checksum_valid(&self) -> bool {
        sha256(&self.payload()) == self.checksum
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.payload();
        out.extend_from_slice(&self.checksum);
        out
    }

    /// Decode and verify the trailing checksum.
    pub fn decode(bytes: &[u8]) -> Result<PartialEnvelope, StoreError> {
        let corrupt = |e: DecodeError| StoreError::Corrupt(format!("envelope: {e}"));
        if bytes.len() < 32 {
            return Err(StoreError::Corrupt(
                "envelope shorter than its checksum".into(),
            ));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        let mut d = Decoder::new(body);
        if d.take(8).map_err(corrupt)? != ENVELOPE_MAGIC {
            return Err(StoreError::Corrupt("bad envelope magic".into()));
        }
        let version = d.u32().map_err(corrupt)?;
        if version != ENVELOPE_VERSION {
            return Err(StoreError::Corrupt(format!(
                "unsupported envelope version {version}"
            )));
        }
        let job_id = d.u64().map_err(corrupt)?;
        let iteration = d.u32().map_err(corrupt)?;
        let mut blocks = Vec::with_capacity(3);
        for _ in 0..3 {
            let kind = BlockKind::from_code(d.u8().map_err(corrupt)?)
                .ok_or_else(|| StoreError::Corrupt("bad block kind".into()))?;
            let n = d.u64().map_err(corrupt)? as usize;
            let bandwidth = d.u64().map_err(corrupt)? as usize;
            let n_obs = d.u64().map_err(corrupt)?;
            let matrix = d.f64s().map_err(corrupt)?;
            let rhs = d.f64s().map_err(corrupt)?;
            if matrix.len() != n * (bandwidth + 1) || rhs.len() != n {
                return Err(StoreError::Corrupt(format!(
                    "{kind:?} block has inconsistent sizes"
                )));
            }
            blocks.push(PartialNormalEquations {
                kind,
                n,
                bandwidth,
                matrix,
                rhs,
                n_obs,
            });
        }
        let cross = CrossTerms {
            n_knots: d.u64().map_err(corrupt)? as usize,
            n_units: d.u64().map_err(corrupt)? as usize,
            ac: d.f64s().map_err(corrupt)?,
            ag: d.f64s().map_err(corrupt)?,
            cg: d.f64s().map_err(corrupt)?,
        };
        if cross.ac.len() != cross.n_knots * cross.n_units
            || cross.ag.len() != cross.n_knots
            || cross.cg.len() != cross.n_units
        {
            return Err(StoreError::Corrupt(
                "cross terms have inconsistent sizes".into(),
            ));
        }
        let chi2 = d.f64().map_err(corrupt)?;
        let sum_sq_residual = d.f64().map_err(corrupt)?;
        let stats = BatchStats {
            n_sources: d.u64().map_err(corrupt)?,
            n_obs: d.u64().map_err(corrupt)?,
            n_underdetermined: d.u64().map_err(corrupt)?,
            chi2_before: d.f64().map_err(corrupt)?,
            max_source_update: d.f64().map_err(corrupt)?,
        };
        let n_results = d.u64().map_err(corrupt)? as usize;
        if n_results > d.remaining() / 8 {
            return Err(StoreError::Corrupt(
                "source result count exceeds payload".into(),
            ));
        }
        let mut source_results = Vec::with_capacity(n_results);
        for _ in 0..n_results {
            let source_id = d.u64().map_err(corrupt)?;
            let status = match d.u8().map_err(corrupt)? {
                0 => SourceStatus::Updated,
                1 => SourceStatus::Underdetermined,
                s => return Err(StoreError::Corrupt(format!("bad source status {s}"))),
            };
            let n_obs = d.u32().map_err(corrupt)?;
            let mut v = [0.0; 7];
            for x in v.iter_mut() {
                *x = d.f64().map_err(corrupt)?;
            }
            let mut covariance = [0.0; 15];
            for x in covariance.iter_mut() {
                *x = d.f64().map_err(corrupt)?;
            }
            source_results.push(SourceResult {
                source_id,
                status,
                n_obs,
                params: SourceParams {
                    alpha: v[0],
                    delta: v[1],
                    parallax: v[2],
                    pm_alpha_star: v[3],
                    pm_delta: v[4],
                    radial_velocity: v[5],
                    epoch: v[6],
                },
                covariance,
                chi2_before: d.f64().map_err(corrupt)?,
                max_update: d.f64().map_err(corrupt)?,
            });
        }
        if d.remaining() != 0 {
            return Err(StoreError::Corrupt("trailing bytes in envelope".into()));
        }
        let global = blocks.pop().expect("three blocks");
        let calibration = blocks.pop().expect("three blocks");
        let attitude = blocks.pop().expect("three blocks");
        if (attitude.kind, calibration.kind, global.kind)
            != (
                BlockKind::Attitude,
                BlockKind::Calibration,
                BlockKind::Global,
            )
        {
            return Err(StoreError::Corrupt("blocks out of order".into()));
        }
        let mut checksum = [0u8; 32];
        checksum.copy_from_slice(sum);
        let env = PartialEnvelope {
            job_id,
            iteration,
            partials: BlockPartials {
                attitude,
                calibration,
                global,
                cross,
                chi2,
                sum_sq_residual,
            },
            stats,
            source_results,
            checksum,
        };
        if !env.checksum_valid() {
            return Err(StoreError::ChecksumMismatch { job_id });
        }
        Ok(env)
    }

    /// First non-finite number, described by block and entry.
    pub fn first_non_finite(&self) -> Option<String> {
        for block in self.partials.blocks() {
            if let Some(i) = block.first_non_finite() {
                let what = if i < block.matrix.len() {
                    format!("matrix entry {i}")
                } else {
                    format!("rhs entry {}", i - block.matrix.len())
                };
                return Some(format!("{:?} {what}", block.kind).to_uppercase());
            }
        }
        if let Some((name, i)) = self.partials.cross.first_non_finite() {
            return Some(format!("CROSS {name} ENTRY {i}"));
        }
        if !(self.partials.chi2.is_finite() && self.partials.sum_sq_residual.is_finite()) {
            return Some("RESIDUAL SUMS".into());
        }
        if !(self.stats.chi2_before.is_finite() && self.stats.max_source_update.is_finite()) {
            return Some("BATCH STATISTICS".into());
        }
        for r in &self.source_results {
            if !r.params.is_finite() || r.covariance.iter().any(|x| !x.is_finite()) {
                return Some(format!("SOURCE {}", r.source_id));
            }
        }
        None
    }
}

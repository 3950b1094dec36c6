use serde::{Deserialize, Serialize};

use super::{AttitudeModel, CalibrationTable, GlobalParams, SolveError};
use crate::model::{observation_partials, ObsMeta, Observation, SourceParams};
use crate::simulator::ScanLaw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    Attitude,
    Calibration,
    Global,
}

impl BlockKind {
    pub fn code(self) -> u8 {
        match self {
            BlockKind::Attitude => 0,
            BlockKind::Calibration => 1,
            BlockKind::Global => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<BlockKind> {
        match c {
            0 => Some(BlockKind::Attitude),
            1 => Some(BlockKind::Calibration),
            2 => Some(BlockKind::Global),
            _ => None,
        }
    }

    /// Stored sub-diagonals: hat functions couple neighbouring knots only,
    /// calibration units and the global parameter are diagonal.
    pub fn bandwidth(self) -> usize {
        match self {
            BlockKind::Attitude => 1,
            BlockKind::Calibration | BlockKind::Global => 0,
        }
    }
}

/// Accumulated `AᵀWA` (symmetric band, lower storage) and `AᵀW·residual`
/// of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialNormalEquations {
    pub kind: BlockKind,
    pub n: usize,
    pub bandwidth: usize,
    /// Entry `(i, i − k)` at `i * (bandwidth + 1) + k`.
    pub matrix: Vec<f64>,
    pub rhs: Vec<f64>,
    pub n_obs: u64,
}

impl PartialNormalEquations {
    pub fn zeros(kind: BlockKind, n: usize) -> Self {
        let bandwidth = kind.bandwidth();
        PartialNormalEquations {
            kind,
            n,
            bandwidth,
            matrix: vec![0.0; n * (bandwidth + 1)],
            rhs: vec![0.0; n],
            n_obs: 0,
        }
    }

    /// Symmetric access; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bandwidth {
            0.0
        } else {
            self.matrix[i * (self.bandwidth + 1) + (i - j)]
        }
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.bandwidth);
        self.matrix[i * (self.bandwidth + 1) + (i - j)] += v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Position of the first non-finite entry: matrix entries first, then the
    /// right-hand side at `matrix.len() + i`.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.matrix
            .iter()
            .chain(self.rhs.iter())
            .position(|x| !x.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.kind == other.kind && self.n == other.n && self.bandwidth == other.bandwidth
    }

    /// In-place sum; shapes must agree.
    pub fn merge_from(&mut self, other: &Self) -> Result<(), String> {
        if !self.same_shape(other) {
            return Err(format!(
                "{:?} block shape mismatch: n {} vs {}",
                self.kind, self.n, other.n
            ));
        }
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
        for (a, b) in self.rhs.iter_mut().zip(&other.rhs) {
            *a += b;
        }
        self.n_obs += other.n_obs;
        Ok(())
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }
}

/// Off-diagonal coupling `AᵀWA` between the attitude, calibration and
/// global blocks. With it the three updates can be applied one after the
/// other from a single accumulation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTerms {
    pub n_knots: usize,
    pub n_units: usize,
    /// Attitude × calibration, entry `(knot, unit)` at `knot * n_units + unit`.
    pub ac: Vec<f64>,
    /// Attitude × global.
    pub ag: Vec<f64>,
    /// Calibration × global.
    pub cg: Vec<f64>,
}

impl CrossTerms {
    pub fn zeros(n_knots: usize, n_units: usize) -> Self {
        CrossTerms {
            n_knots,
            n_units,
            ac: vec![0.0; n_knots * n_units],
            ag: vec![0.0; n_knots],
            cg: vec![0.0; n_units],
        }
    }

    /// Position of the first non-finite entry, in `ac`, `ag`, `cg` order.
    pub fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        for (name, v) in [("A-C", &self.ac), ("A-G", &self.ag), ("C-G", &self.cg)] {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Some((name, i));
            }
        }
        None
    }

    pub fn merge_from(&mut self, other: &Self) -> Result<(), String> {
        if (self.n_knots, self.n_units) != (other.n_knots, other.n_units) {
            return Err("cross-term shape mismatch".into());
        }
        for (a, b) in self.ac.iter_mut().zip(&other.ac) {
            *a += b;
        }
        for (a, b) in self.ag.iter_mut().zip(&other.ag) {
            *a += b;
        }
        for (a, b) in self.cg.iter_mut().zip(&other.cg) {
            *a += b;
        }
        Ok(())
    }
}

/// The three block accumulators plus residual statistics of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartials {
    pub attitude: PartialNormalEquations,
    pub calibration: PartialNormalEquations,
    pub global: PartialNormalEquations,
    pub cross: CrossTerms,
    /// Σ (r/σ)² over the accumulated observations.
    pub chi2: f64,
    /// Σ r², rad².
    pub sum_sq_residual: f64,
}

impl BlockPartials {
    pub fn zeros(n_knots: usize, n_units: usize) -> Self {
        BlockPartials {
            attitude: PartialNormalEquations::zeros(BlockKind::Attitude, n_knots),
            calibration: PartialNormalEquations::zeros(BlockKind::Calibration, n_units),
            global: PartialNormalEquations::zeros(BlockKind::Global, 1),
            cross: CrossTerms::zeros(n_knots, n_units),
            chi2: 0.0,
            sum_sq_residual: 0.0,
        }
    }

    pub fn blocks(&self) -> [&PartialNormalEquations; 3] {
        [&self.attitude, &self.calibration, &self.global]
    }

    pub fn n_obs(&self) -> u64 {
        self.global.n_obs
    }

    /// Add one observation with its (already updated) source.
    pub fn accumulate(
        &mut self,
        source: &SourceParams,
        obs: &Observation,
        att: &AttitudeModel,
        cal: &CalibrationTable,
        glob: &GlobalParams,
        law: &ScanLaw,
    ) -> Result<(), SolveError> {
        let err = |error| SolveError::Model {
            source_id: obs.source_id,
            t: obs.t,
            error,
        };
        obs.check_finite().map_err(err)?;
        let d =
            observation_partials(source, att, cal, glob, &ObsMeta::from(obs), law).map_err(err)?;
        let r = obs.abscissa_obs - d.predicted;
        let w = 1.0 / (obs.sigma * obs.sigma);
        if !(r.is_finite() && w.is_finite()) {
            return Err(SolveError::NonFinite(format!(
                "residual of source {} at t = {}",
                obs.source_id, obs.t
            )));
        }
        let wr = w * r;

        let [(i, a), (j, b)] = d.attitude;
        self.attitude.add(i, i, w * a * a);
        self.attitude.add(j, i, w * a * b);
        self.attitude.add(j, j, w * b * b);
        self.attitude.rhs[i] += a * wr;
        self.attitude.rhs[j] += b * wr;
        self.attitude.n_obs += 1;

        let (u, c) = d.calib;
        let u = u as usize;
        if u >= self.calibration.n {
            return Err(SolveError::NonFinite(format!(
                "calibration unit {u} of source {} outside table",
                obs.source_id
            )));
        }
        self.calibration.add(u, u, w * c * c);
        self.calibration.rhs[u] += c * wr;
        self.calibration.n_obs += 1;

        let gl = d.global;
        self.global.add(0, 0, w * gl * gl);
        self.global.rhs[0] += gl * wr;
        self.global.n_obs += 1;

        let x = &mut self.cross;
        x.ac[i * x.n_units + u] += w * a * c;
        x.ac[j * x.n_units + u] += w * b * c;
        x.ag[i] += w * a * gl;
        x.ag[j] += w * b * gl;
        x.cg[u] += w * c * gl;

        self.chi2 += wr * r;
        self.sum_sq_residual += r * r;
        Ok(())
    }

    /// Sum `other` into `self`, block by block.
    pub fn merge_from(&mut self, other: &BlockPartials) -> Result<(), String> {
        self.attitude.merge_from(&other.attitude)?;
        self.calibration.merge_from(&other.calibration)?;
        self.global.merge_from(&other.global)?;
        self.cross.merge_from(&other.cross)?;
        self.chi2 += other.chi2;
        self.sum_sq_residual += other.sum_sq_residual;
        Ok(())
    }
}

/// Accumulate the attitude, calibration and global normal equations of a
/// batch, observation by observation in the given order.
pub fn accumulate_block_partials(
    batch: &[(SourceParams, &[Observation])],
    att: &AttitudeModel,
    cal: &CalibrationTable,
    glob: &GlobalParams,
    law: &ScanLaw,
) -> Result<BlockPartials, SolveError> {
    let mut acc = BlockPartials::zeros(att.n_knots(), cal.len());
    for (source, obs) in batch {
        for o in obs.iter() {
            acc.accumulate(source, o, att, cal, glob, law)?;
        }
    }
    Ok(acc)
}

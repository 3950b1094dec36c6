//! Block-iterative least squares over sources, attitude, calibration and
//! global parameters.
//!
//! One outer iteration updates the sources (each one independently, with the
//! other blocks frozen), accumulates the partial normal equations of the
//! three remaining blocks from the updated sources, and then applies the
//! attitude, calibration and global updates in that order. Successive outer
//! iterates are combined by Anderson extrapolation.

mod accel;
mod banded;
mod blocks;
mod frame;
mod iteration;
mod normal;
mod secondary;
mod source;

pub use accel::Anderson;
pub use banded::{banded_cholesky_solve, BandedError};
pub use blocks::{
    attitude_update, calibration_update, global_update, sequential_block_updates, AttitudeDelta,
    BlockDeltas, ATTITUDE_DAMPING,
};
pub use frame::{estimate_frame, frame_align, FrameCorrection};
pub use iteration::{
    aberration_scale, outer_iteration, run_agis, run_agis_from, termination_of, BatchExecutor,
    ConvergenceReport, InProcessExecutor, IterationRecord, RunOutcome, RunProgress, Termination,
};
pub use normal::{
    accumulate_block_partials, BlockKind, BlockPartials, CrossTerms, PartialNormalEquations,
};
pub use secondary::{secondary_solve, SecondaryResult};
pub use source::{source_update, SourceFit};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, SourceId, SourceParams};
use crate::whiteboard::StoreError;

/// Piecewise-linear spin-phase correction over uniform knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttitudeModel {
    pub start: f64,
    pub spacing: f64,
    /// rad, one per knot.
    pub coeffs: Vec<f64>,
}

impl AttitudeModel {
    /// Zero correction over knots covering `[start, end]`.
    pub fn zeros(start: f64, end: f64, spacing: f64) -> Self {
        let n = (((end - start) / spacing) - 1e-9).ceil().max(1.0) as usize + 1;
        AttitudeModel {
            start,
            spacing,
            coeffs: vec![0.0; n],
        }
    }

    pub fn n_knots(&self) -> usize {
        self.coeffs.len()
    }

    pub fn knot_time(&self, i: usize) -> f64 {
        self.start + i as f64 * self.spacing
    }

    pub fn end(&self) -> f64 {
        self.knot_time(self.coeffs.len() - 1)
    }

    /// Correction at `t` and the two hat-function weights `(knot, weight)`.
    pub fn evaluate(&self, t: f64) -> Result<(f64, [(usize, f64); 2]), ModelError> {
        let n = self.coeffs.len();
        let end = self.end();
        if !(t >= self.start && t <= end) || n < 2 {
            return Err(ModelError::OutOfAttitudeSpan {
                t,
                start: self.start,
                end,
            });
        }
        let x = (t - self.start) / self.spacing;
        let i = (x.floor() as usize).min(n - 2);
        let f = x - i as f64;
        let value = (1.0 - f) * self.coeffs[i] + f * self.coeffs[i + 1];
        Ok((value, [(i, 1.0 - f), (i + 1, f)]))
    }

    pub fn is_finite(&self) -> bool {
        self.start.is_finite()
            && self.spacing.is_finite()
            && self.coeffs.iter().all(|c| c.is_finite())
    }
}

/// Along-scan offset per calibration unit; zero mean by construction of the
/// updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub offsets: Vec<f64>,
}

impl CalibrationTable {
    pub fn new(offsets: Vec<f64>) -> Self {
        CalibrationTable { offsets }
    }

    pub fn zeros(n: usize) -> Self {
        CalibrationTable {
            offsets: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Offset of `unit`; units outside the table are reported as NaN so the
    /// finite checks downstream catch them.
    pub fn offset(&self, unit: u16) -> f64 {
        self.offsets.get(unit as usize).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    /// Deviation of the aberration scale from 1.
    pub g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_outer: u32,
    /// rad
    pub tol_update: f64,
    pub tol_chi2_rel: f64,
    /// days
    pub attitude_knot_spacing: f64,
    pub primary_fraction: f64,
    /// Zero the update of calibration units without observations instead of
    /// failing.
    pub allow_empty_calib_units: bool,
    /// Past outer iterations mixed into each new iterate; 0 disables the
    /// extrapolation.
    pub acceleration_depth: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer: 100,
            tol_update: 1e-11,
            tol_chi2_rel: 1e-10,
            attitude_knot_spacing: 0.25,
            primary_fraction: 0.5,
            allow_empty_calib_units: false,
            acceleration_depth: 8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if self.max_outer < 1 {
            return Err(SolveError::InvalidConfig(
                "max_outer must be at least 1".into(),
            ));
        }
        if !(self.tol_update > 0.0 && self.tol_chi2_rel > 0.0) {
            return Err(SolveError::InvalidConfig(
                "tolerances must be positive".into(),
            ));
        }
        if !(self.attitude_knot_spacing > 0.0 && self.attitude_knot_spacing.is_finite()) {
            return Err(SolveError::InvalidConfig(
                "knot spacing must be positive".into(),
            ));
        }
        if !(self.primary_fraction > 0.0 && self.primary_fraction <= 1.0) {
            return Err(SolveError::InvalidConfig(
                "primary_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Number of primary sources: the first ⌈f·n⌉ ids.
    pub fn n_primary(&self, n_sources: usize) -> usize {
        ((self.primary_fraction * n_sources as f64).ceil() as usize).clamp(0, n_sources)
    }
}

/// Full solver state: the catalog (indexed by source id) and the three
/// global blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub iteration: u32,
    pub sources: Vec<SourceParams>,
    pub n_primary: usize,
    pub attitude: AttitudeModel,
    pub calibration: CalibrationTable,
    pub global: GlobalParams,
}

impl SolverState {
    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        if let Some(i) = self.sources.iter().position(|s| !s.is_finite()) {
            return Some(format!("source {i}"));
        }
        if let Some(i) = self.attitude.coeffs.iter().position(|c| !c.is_finite()) {
            return Some(format!("attitude knot {i}"));
        }
        if let Some(i) = self.calibration.offsets.iter().position(|c| !c.is_finite()) {
            return Some(format!("calibration unit {i}"));
        }
        if !self.global.g.is_finite() {
            return Some("global g".into());
        }
        None
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("model error at source {source_id} (t = {t}): {error}")]
    Model {
        source_id: SourceId,
        t: f64,
        error: ModelError,
    },
    #[error("source {source_id} is underdetermined: {reason}")]
    UnderdeterminedSource { source_id: SourceId, reason: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("singular {kind:?} block: {detail}")]
    SingularBlock { kind: BlockKind, detail: String },
    #[error("degenerate frame anchors: {0}")]
    DegenerateAnchors(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("batch execution failed: {0}")]
    Executor(String),
    #[error("run halted after iteration {0}")]
    Halted(u32),
}

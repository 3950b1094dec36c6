use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::accel::Anderson;
use super::blocks::{sequential_block_updates, ATTITUDE_DAMPING};
use super::frame::{frame_align, FrameCorrection};
use super::{SolveError, SolverConfig, SolverState};
use crate::datatrain::{process_batch, BlockLoader};
use crate::model::{SourceId, SourceParams};
use crate::simulator::ScanLaw;
use crate::units::{AU_KM, C_KMS, DAYS_PER_YEAR, SECONDS_PER_DAY};
use crate::whiteboard::{merge_partials, partition, JobKind, PartialEnvelope, SourceStatus};

/// Runs the source jobs of one iteration and returns their envelopes.
pub trait BatchExecutor {
    fn run_jobs(
        &mut self,
        kind: JobKind,
        ids: &[SourceId],
        state: &SolverState,
        law: &ScanLaw,
    ) -> Result<Vec<PartialEnvelope>, SolveError>;

    fn workers(&self) -> usize {
        1
    }
}

/// Executes every batch in the calling process.
pub struct InProcessExecutor<L: BlockLoader> {
    pub loader: L,
    pub batch_size: usize,
    /// Update the sources of each batch on the rayon pool.
    pub parallel: bool,
    next_job: u64,
}

impl<L: BlockLoader> InProcessExecutor<L> {
    pub fn new(loader: L, batch_size: usize) -> Self {
        InProcessExecutor {
            loader,
            batch_size,
            parallel: false,
            next_job: 0,
        }
    }
}

impl<L: BlockLoader> BatchExecutor for InProcessExecutor<L> {
    fn run_jobs(
        &mut self,
        kind: JobKind,
        ids: &[SourceId],
        state: &SolverState,
        law: &ScanLaw,
    ) -> Result<Vec<PartialEnvelope>, SolveError> {
        if self.batch_size == 0 {
            return Err(SolveError::InvalidConfig(
                "batch size must be at least 1".into(),
            ));
        }
        let mut out = Vec::new();
        for range in partition(ids, self.batch_size) {
            let job_id = self.next_job;
            self.next_job += 1;
            out.push(process_batch(
                job_id,
                state.iteration,
                kind,
                range,
                &self.loader,
                state,
                law,
                self.parallel,
            )?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    /// rad, over the observations of the updated primary sources.
    pub rms_residual: f64,
    /// Weighted χ² after the source block.
    pub chi2: f64,
    /// Weighted χ² of the same observations before the source block.
    pub chi2_before_source: f64,
    pub max_source_update: f64,
    pub max_attitude_update: f64,
    pub max_calibration_update: f64,
    pub global_update: f64,
    pub n_obs: u64,
    pub n_underdetermined: u64,
    pub unconstrained_knots: usize,
    pub workers: usize,
    pub wall_time_s: f64,
}

impl IterationRecord {
    /// χ² did not rise over the source block, within `rel` relative slack
    /// and an absolute floor for round-off at a perfect fit.
    pub fn source_block_descends(&self, rel: f64, abs: f64) -> bool {
        self.chi2 <= self.chi2_before_source * (1.0 + rel) + abs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    UpdateBelowTolerance,
    Chi2Stalled,
    MaxIterations,
}

impl Termination {
    pub fn converged(self) -> bool {
        self != Termination::MaxIterations
    }

    pub fn describe(self) -> &'static str {
        match self {
            Termination::UpdateBelowTolerance => "update below tolerance",
            Termination::Chi2Stalled => "relative chi2 change below tolerance",
            Termination::MaxIterations => "maximum outer iterations reached",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    pub frame: Option<FrameCorrection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub state: SolverState,
    pub report: ConvergenceReport,
}

/// Whether the last record ends the run: its largest update (Δg expressed as
/// an angle) is below `tol_update`, or χ² changed by less than `tol_chi2_rel`
/// relative to the record before it.
pub fn termination_of(
    records: &[IterationRecord],
    config: &SolverConfig,
    g_scale: f64,
) -> Option<Termination> {
    let rec = records.last()?;
    let max_update = rec
        .max_source_update
        .max(rec.max_attitude_update)
        .max(rec.max_calibration_update)
        .max(rec.global_update.abs() * g_scale);
    if max_update < config.tol_update {
        return Some(Termination::UpdateBelowTolerance);
    }
    let prev = records.len().checked_sub(2).map(|i| &records[i])?;
    let stalled =
        (prev.chi2 - rec.chi2).abs() <= config.tol_chi2_rel * prev.chi2.max(f64::MIN_POSITIVE);
    stalled.then_some(Termination::Chi2Stalled)
}

/// Angle corresponding to a unit change of the aberration scale.
pub fn aberration_scale(law: &ScanLaw) -> f64 {
    let speed = law.orbit.radius_au * AU_KM * 2.0 * std::f64::consts::PI
        / (DAYS_PER_YEAR * SECONDS_PER_DAY);
    speed / C_KMS
}

fn amax(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// One pass through the source, attitude, calibration and global blocks, in
/// that order.
pub fn outer_iteration(
    state: &SolverState,
    exec: &mut dyn BatchExecutor,
    config: &SolverConfig,
    law: &ScanLaw,
) -> Result<(SolverState, IterationRecord), SolveError> {
    if let Some(loc) = state.first_non_finite() {
        return Err(SolveError::NonFinite(format!("solver state, {loc}")));
    }
    let t0 = Instant::now();
    let primary: Vec<SourceId> = (0..state.n_primary as SourceId).collect();
    let envelopes = exec.run_jobs(JobKind::SourceUpdate, &primary, state, law)?;
    let merged = merge_partials(&envelopes)?
        .ok_or_else(|| SolveError::InvalidConfig("no primary sources".into()))?;

    let mut next = state.clone();
    for r in &merged.source_results {
        if r.status == SourceStatus::Updated {
            next.sources[r.source_id as usize] = r.params;
        }
    }
    let p = &merged.partials;
    let deltas = sequential_block_updates(p, ATTITUDE_DAMPING, config.allow_empty_calib_units)?;
    let (da, dc, dg) = (&deltas.attitude, &deltas.calibration, deltas.global);
    for (c, d) in next.attitude.coeffs.iter_mut().zip(&da.delta) {
        *c += d;
    }
    for (c, d) in next.calibration.offsets.iter_mut().zip(dc) {
        *c += d;
    }
    next.global.g += dg;
    next.iteration += 1;
    if let Some(loc) = next.first_non_finite() {
        return Err(SolveError::NonFinite(format!("updated state, {loc}")));
    }
    let n_obs = p.n_obs();
    let record = IterationRecord {
        iteration: state.iteration,
        rms_residual: if n_obs > 0 {
            (p.sum_sq_residual / n_obs as f64).sqrt()
        } else {
            0.0
        },
        chi2: p.chi2,
        chi2_before_source: merged.stats.chi2_before,
        max_source_update: merged.stats.max_source_update,
        max_attitude_update: amax(&da.delta),
        max_calibration_update: amax(dc),
        global_update: dg,
        n_obs,
        n_underdetermined: merged.stats.n_underdetermined,
        unconstrained_knots: da.unconstrained_knots.len(),
        workers: exec.workers(),
        wall_time_s: t0.elapsed().as_secs_f64(),
    };
    Ok((next, record))
}

fn add_frame(total: &mut Option<FrameCorrection>, c: FrameCorrection) {
    match total {
        Some(t) => {
            t.rotation += c.rotation;
            t.spin += c.spin;
        }
        None => *total = Some(c),
    }
}

/// A run after some outer iterations: everything needed to continue it with
/// a bitwise identical result.
#[derive(Debug, Clone, PartialEq)]
pub struct RunProgress {
    pub state: SolverState,
    pub records: Vec<IterationRecord>,
    pub accel: Anderson,
    /// Total rotation and spin removed so far.
    pub frame: Option<FrameCorrection>,
}

impl RunProgress {
    pub fn start(initial: SolverState, config: &SolverConfig, law: &ScanLaw) -> Self {
        RunProgress {
            state: initial,
            records: Vec::new(),
            accel: Anderson::new(config.acceleration_depth, aberration_scale(law)),
            frame: None,
        }
    }
}

/// Iterate until the largest update (Δg expressed as an angle) is below
/// `tol_update`, the relative χ² change is below `tol_chi2_rel`, or
/// `max_outer` iterations ran; then align the frame to the anchors.
/// Non-convergence is reported in the termination reason, not as an error.
///
/// With anchors, every iterate is also aligned before extrapolation. The
/// single-axis attitude absorbs a frame rotation only about the spin axis,
/// so the other rotation components are not an exact null space but a very
/// weakly determined one, and iterates drifting along it stall.
pub fn run_agis(
    initial: SolverState,
    exec: &mut dyn BatchExecutor,
    config: &SolverConfig,
    law: &ScanLaw,
    anchors: &[(SourceId, SourceParams)],
) -> Result<RunOutcome, SolveError> {
    let progress = RunProgress::start(initial, config, law);
    run_agis_from(progress, exec, config, law, anchors, |_| Ok(()))
}

/// [`run_agis`] continuing from `progress`, with a callback after every
/// iteration (used for checkpoints). A run resumed from the progress passed
/// to the callback ends exactly as the uninterrupted one.
pub fn run_agis_from(
    mut progress: RunProgress,
    exec: &mut dyn BatchExecutor,
    config: &SolverConfig,
    law: &ScanLaw,
    anchors: &[(SourceId, SourceParams)],
    mut on_iteration: impl FnMut(&RunProgress) -> Result<(), SolveError>,
) -> Result<RunOutcome, SolveError> {
    config.validate()?;
    let scale = aberration_scale(law);
    let mut termination = termination_of(&progress.records, config, scale);
    while termination.is_none() && progress.records.len() < config.max_outer as usize {
        let (mut next, rec) = outer_iteration(&progress.state, exec, config, law)?;
        if !anchors.is_empty() {
            let (aligned, c) = frame_align(&next, anchors, law)?;
            next = aligned;
            add_frame(&mut progress.frame, c);
        }
        progress.state = progress.accel.step(&progress.state, &next)?;
        progress.records.push(rec);
        termination = termination_of(&progress.records, config, scale);
        on_iteration(&progress)?;
    }
    let termination = termination.unwrap_or(Termination::MaxIterations);
    let RunProgress {
        mut state,
        records,
        mut frame,
        ..
    } = progress;
    if !anchors.is_empty() {
        let (aligned, c) = frame_align(&state, anchors, law)?;
        state = aligned;
        add_frame(&mut frame, c);
    }
    Ok(RunOutcome {
        state,
        report: ConvergenceReport {
            records,
            termination,
            frame,
        },
    })
}

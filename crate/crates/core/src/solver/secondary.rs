use super::iteration::BatchExecutor;
use super::{SolveError, SolverState};
use crate::model::SourceId;
use crate::simulator::ScanLaw;
use crate::whiteboard::{merge_partials, JobKind, SourceResult, SourceStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct SecondaryResult {
    /// Every requested source in ascending id, updated or flagged.
    pub results: Vec<SourceResult>,
    pub underdetermined: Vec<SourceId>,
    /// Linearized passes taken.
    pub passes: u32,
}

pub const MAX_SECONDARY_PASSES: u32 = 20;

/// Source updates for `ids` against the frozen attitude, calibration and
/// global parameters of `state`, repeated until no source moves by `tol`
/// (rad) or more. Pass `k` runs as iteration `state.iteration + k`.
/// Underdetermined sources are collected, not fatal.
pub fn secondary_solve(
    state: &SolverState,
    ids: &[SourceId],
    exec: &mut dyn BatchExecutor,
    law: &ScanLaw,
    tol: f64,
) -> Result<SecondaryResult, SolveError> {
    let mut work = state.clone();
    let mut results = Vec::new();
    let mut passes = 0;
    while passes < MAX_SECONDARY_PASSES {
        work.iteration = state.iteration + passes;
        let envelopes = exec.run_jobs(JobKind::SecondaryUpdate, ids, &work, law)?;
        passes += 1;
        results = merge_partials(&envelopes)?
            .map(|m| m.source_results)
            .unwrap_or_default();
        let mut moved: f64 = 0.0;
        for r in &results {
            if r.status == SourceStatus::Updated {
                let old = &mut work.sources[r.source_id as usize];
                moved = r
                    .params
                    .difference(old)
                    .iter()
                    .fold(moved, |m, d| m.max(d.abs()));
                *old = r.params;
            }
        }
        if moved < tol {
            break;
        }
    }
    let underdetermined = results
        .iter()
        .filter(|r| r.status == SourceStatus::Underdetermined)
        .map(|r| r.source_id)
        .collect();
    Ok(SecondaryResult {
        results,
        underdetermined,
        passes,
    })
}

impl SecondaryResult {
    /// Copy the updated parameters into `state`.
    pub fn apply(&self, state: &mut SolverState) {
        for r in &self.results {
            if r.status == SourceStatus::Updated {
                state.sources[r.source_id as usize] = r.params;
            }
        }
    }
}

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::BatchError;
use crate::io::{FormatError, ObservationStore};
use crate::model::{ModelError, Observation, SourceId};
use crate::simulator::ScanLaw;
use crate::solver::{source_update, BlockPartials, SolveError, SolverState};
use crate::whiteboard::{BatchStats, JobId, JobKind, PartialEnvelope, SourceResult, SourceStatus};

/// Source of grouped observation blocks.
pub trait BlockLoader: Send + Sync {
    /// Sub-ranges that fit the memory budget, in ascending order.
    fn split(&self, range: (SourceId, SourceId)) -> Result<Vec<(SourceId, SourceId)>, FormatError>;

    /// Observations of every source in `range`, ascending id then time.
    fn load(
        &self,
        range: (SourceId, SourceId),
    ) -> Result<Vec<(SourceId, Vec<Observation>)>, FormatError>;
}

/// Observation store read through a per-load byte budget.
#[derive(Debug, Clone)]
pub struct BudgetedStore {
    pub store: ObservationStore,
    pub max_bytes: u64,
}

impl BlockLoader for BudgetedStore {
    fn split(&self, range: (SourceId, SourceId)) -> Result<Vec<(SourceId, SourceId)>, FormatError> {
        self.store.split_range(range, self.max_bytes)
    }

    fn load(
        &self,
        range: (SourceId, SourceId),
    ) -> Result<Vec<(SourceId, Vec<Observation>)>, FormatError> {
        self.store.read_range(range)
    }
}

/// Observations held in memory.
#[derive(Debug, Clone, Default)]
pub struct MemoryObservations {
    by_source: BTreeMap<SourceId, Vec<Observation>>,
}

impl MemoryObservations {
    /// Groups `obs` by source; each group is sorted by time.
    pub fn new(obs: &[Observation]) -> Self {
        let mut by_source: BTreeMap<SourceId, Vec<Observation>> = BTreeMap::new();
        for o in obs {
            by_source.entry(o.source_id).or_default().push(*o);
        }
        for v in by_source.values_mut() {
            v.sort_by(|a, b| a.t.total_cmp(&b.t));
        }
        MemoryObservations { by_source }
    }

    pub fn source(&self, id: SourceId) -> &[Observation] {
        self.by_source.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }
}

impl BlockLoader for MemoryObservations {
    fn split(&self, range: (SourceId, SourceId)) -> Result<Vec<(SourceId, SourceId)>, FormatError> {
        Ok(if range.1 > range.0 {
            vec![range]
        } else {
            vec![]
        })
    }

    fn load(
        &self,
        range: (SourceId, SourceId),
    ) -> Result<Vec<(SourceId, Vec<Observation>)>, FormatError> {
        Ok((range.0..range.1)
            .map(|id| (id, self.source(id).to_vec()))
            .collect())
    }
}

fn non_finite(job_id: JobId, e: SolveError) -> BatchError {
    match e {
        SolveError::Model {
            source_id,
            t,
            error: error @ ModelError::NonFiniteInput(_),
        } => BatchError::NonFinite {
            job_id,
            location: format!("source {source_id} observation at t = {t}: {error}"),
        },
        SolveError::NonFinite(location) => BatchError::NonFinite { job_id, location },
        other => BatchError::Solve(other),
    }
}

/// Source updates for every source of the job's range, then (for primary
/// jobs) accumulation of the attitude, calibration and global normal
/// equations over the updated sources in ascending source order.
///
/// `parallel` runs the independent source updates on the rayon pool; the
/// accumulation stays sequential, so the envelope is identical either way.
#[allow(clippy::too_many_arguments)]
pub fn process_batch(
    job_id: JobId,
    iteration: u32,
    kind: JobKind,
    range: (SourceId, SourceId),
    loader: &dyn BlockLoader,
    state: &SolverState,
    law: &ScanLaw,
    parallel: bool,
) -> Result<PartialEnvelope, BatchError> {
    if range.1 as usize > state.sources.len() {
        return Err(BatchError::Solve(SolveError::InvalidConfig(format!(
            "job {job_id} range {range:?} outside the catalog of {}",
            state.sources.len()
        ))));
    }
    let (att, cal, glob) = (&state.attitude, &state.calibration, &state.global);
    let mut partials = BlockPartials::zeros(att.n_knots(), cal.len());
    let mut stats = BatchStats {
        n_sources: range.1 - range.0,
        ..BatchStats::default()
    };
    let mut results = Vec::with_capacity(stats.n_sources as usize);

    for sub in loader.split(range)? {
        let groups = loader.load(sub)?;
        let fit = |(id, obs): &(SourceId, Vec<Observation>)| {
            source_update(obs, att, cal, glob, &state.sources[*id as usize], law)
        };
        let fits: Vec<_> = if parallel {
            groups.par_iter().map(fit).collect()
        } else {
            groups.iter().map(fit).collect()
        };
        for ((id, obs), fit) in groups.iter().zip(fits) {
            match fit {
                Ok(f) => {
                    if kind == JobKind::SourceUpdate {
                        for o in obs {
                            partials
                                .accumulate(&f.params, o, att, cal, glob, law)
                                .map_err(|e| non_finite(job_id, e))?;
                        }
                    }
                    stats.n_obs += obs.len() as u64;
                    stats.chi2_before += f.chi2_before;
                    stats.max_source_update = stats.max_source_update.max(f.max_update);
                    results.push(SourceResult {
                        source_id: *id,
                        status: SourceStatus::Updated,
                        n_obs: obs.len() as u32,
                        params: f.params,
                        covariance: SourceResult::pack_covariance(&f.covariance),
                        chi2_before: f.chi2_before,
                        max_update: f.max_update,
                    });
                }
                Err(SolveError::UnderdeterminedSource { .. }) => {
                    stats.n_underdetermined += 1;
                    results.push(SourceResult {
                        source_id: *id,
                        status: SourceStatus::Underdetermined,
                        n_obs: obs.len() as u32,
                        params: state.sources[*id as usize],
                        covariance: [0.0; 15],
                        chi2_before: 0.0,
                        max_update: 0.0,
                    });
                }
                Err(e) => return Err(non_finite(job_id, e)),
            }
        }
    }
    let env = PartialEnvelope::new(job_id, iteration, partials, stats, results);
    if let Some(location) = env.first_non_finite() {
        return Err(BatchError::NonFinite { job_id, location });
    }
    Ok(env)
}

use super::{BatchStats, PartialEnvelope, SourceResult, StoreError};
use crate::solver::BlockPartials;

/// Sum of all envelopes of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedIteration {
    pub iteration: u32,
    pub partials: BlockPartials,
    pub stats: BatchStats,
    /// In job order, which is ascending source id.
    pub source_results: Vec<SourceResult>,
    pub n_jobs: usize,
}

/// Reduce envelopes in ascending job id, whatever order they arrive in.
/// The first envelope is cloned rather than added to zeros so that the
/// result of a single-envelope merge is bitwise its own partials.
pub fn merge_partials(
    envelopes: &[PartialEnvelope],
) -> Result<Option<MergedIteration>, StoreError> {
    let mut order: Vec<&PartialEnvelope> = envelopes.iter().collect();
    order.sort_by_key(|e| e.job_id);
    for w in order.windows(2) {
        if w[0].job_id == w[1].job_id {
            return Err(StoreError::Invalid(format!(
                "job {} merged twice",
                w[0].job_id
            )));
        }
    }
    for e in &order {
        if let Some(location) = e.first_non_finite() {
            return Err(StoreError::FiniteCheckFailed {
                job_id: e.job_id,
                location,
            });
        }
    }
    let Some(first) = order.first() else {
        return Ok(None);
    };
    let mut out = MergedIteration {
        iteration: first.iteration,
        partials: first.partials.clone(),
        stats: first.stats,
        source_results: first.source_results.clone(),
        n_jobs: order.len(),
    };
    for e in &order[1..] {
        if e.iteration != out.iteration {
            return Err(StoreError::Invalid(format!(
                "job {} belongs to iteration {}, expected {}",
                e.job_id, e.iteration, out.iteration
            )));
        }
        out.partials
            .merge_from(&e.partials)
            .map_err(|d| StoreError::Invalid(format!("job {}: {d}", e.job_id)))?;
        let s = &mut out.stats;
        s.n_sources += e.stats.n_sources;
        s.n_obs += e.stats.n_obs;
        s.n_underdetermined += e.stats.n_underdetermined;
        s.chi2_before += e.stats.chi2_before;
        s.max_source_update = s.max_source_update.max(e.stats.max_source_update);
        out.source_results.extend_from_slice(&e.source_results);
    }
    if let Some(location) = out
        .partials
        .blocks()
        .iter()
        .find_map(|b| b.first_non_finite())
    {
        return Err(StoreError::FiniteCheckFailed {
            job_id: order.last().map(|e| e.job_id).unwrap_or(0),
            location: format!("merged accumulator entry {location}"),
        });
    }
    Ok(Some(out))
}

use nalgebra::{Matrix5, SymmetricEigen, Vector5};

use super::{AttitudeModel, CalibrationTable, GlobalParams, SolveError};
use crate::model::{observation_partials, ObsMeta, Observation, SourceParams};
use crate::simulator::ScanLaw;

/// Gauss–Newton passes per source update.
pub const MAX_LINEARIZATIONS: usize = 3;

/// Condition number above which a source is treated as underdetermined.
pub const MAX_CONDITION: f64 = 1e12;

/// Result of one source update.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFit {
    pub params: SourceParams,
    /// Inverse normal matrix in rad-equivalents.
    pub covariance: Matrix5<f64>,
    /// χ² of the observations at the starting parameters.
    pub chi2_before: f64,
    /// Largest |Δ| applied, rad-equivalents.
    pub max_update: f64,
}

/// Least-squares fit of the five astrometric parameters of one source with
/// attitude, calibration and global parameters frozen.
pub fn source_update(
    obs: &[Observation],
    att: &AttitudeModel,
    cal: &CalibrationTable,
    glob: &GlobalParams,
    s0: &SourceParams,
    law: &ScanLaw,
) -> Result<SourceFit, SolveError> {
    let source_id = obs.first().map(|o| o.source_id).unwrap_or(u64::MAX);
    if !s0.is_finite() {
        return Err(SolveError::NonFinite(format!(
            "starting parameters of source {source_id}"
        )));
    }
    for o in obs {
        o.check_finite().map_err(|error| SolveError::Model {
            source_id: o.source_id,
            t: o.t,
            error,
        })?;
    }
    if obs.len() < 5 {
        return Err(SolveError::UnderdeterminedSource {
            source_id,
            reason: format!("{} observations", obs.len()),
        });
    }
    let t0 = obs[0].t;
    if obs.iter().all(|o| o.t == t0) {
        return Err(SolveError::UnderdeterminedSource {
            source_id,
            reason: "all observations at one epoch".into(),
        });
    }

    let mut s = *s0;
    let mut chi2_before = f64::NAN;
    let mut max_update: f64 = 0.0;
    let mut covariance = Matrix5::zeros();
    for pass in 0..MAX_LINEARIZATIONS {
        let mut n = Matrix5::<f64>::zeros();
        let mut b = Vector5::<f64>::zeros();
        let mut chi2 = 0.0;
        for o in obs {
            let d = observation_partials(&s, att, cal, glob, &ObsMeta::from(o), law).map_err(
                |error| SolveError::Model {
                    source_id: o.source_id,
                    t: o.t,
                    error,
                },
            )?;
            let a = Vector5::from(d.source);
            let w = 1.0 / (o.sigma * o.sigma);
            let r = o.abscissa_obs - d.predicted;
            n += a * a.transpose() * w;
            b += a * (w * r);
            chi2 += w * r * r;
        }
        if pass == 0 {
            chi2_before = chi2;
        }
        if !(n.iter().all(|x| x.is_finite()) && b.iter().all(|x| x.is_finite())) {
            return Err(SolveError::NonFinite(format!(
                "normal equations of source {source_id}"
            )));
        }
        let eig = SymmetricEigen::new(n).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 0.0) || hi / lo > MAX_CONDITION {
            return Err(SolveError::UnderdeterminedSource {
                source_id,
                reason: format!("condition number {:.3e}", hi / lo),
            });
        }
        let chol = n
            .cholesky()
            .ok_or_else(|| SolveError::UnderdeterminedSource {
                source_id,
                reason: "normal matrix not positive definite".into(),
            })?;
        let delta = chol.solve(&b);
        covariance = chol.inverse();
        let step = delta.amax();
        max_update = max_update.max(step);
        s = s.apply_update(&[delta[0], delta[1], delta[2], delta[3], delta[4]]);
        if step < 1e-15 {
            break;
        }
    }
    Ok(SourceFit {
        params: s,
        covariance,
        chi2_before,
        max_update,
    })
}

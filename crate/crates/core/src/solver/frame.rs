use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::{SolveError, SolverState};
use crate::model::{local_triad, SourceId, SourceParams};
use crate::simulator::ScanLaw;
use crate::units::{wrap_two_pi, DAYS_PER_YEAR, MAS};

/// Rotation `ε` (rad) and spin `ω` (rad/yr) of a solution relative to the
/// anchors: solved ≈ R(ε + ω·τ) · anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameCorrection {
    pub rotation: Vector3<f64>,
    pub spin: Vector3<f64>,
    pub n_anchors: usize,
}

const MAX_ANCHOR_CONDITION: f64 = 1e8;

/// Least-squares rotation and spin of `sources` relative to `anchors`.
pub fn estimate_frame(
    sources: &[SourceParams],
    anchors: &[(SourceId, SourceParams)],
) -> Result<FrameCorrection, SolveError> {
    if anchors.len() < 3 {
        return Err(SolveError::DegenerateAnchors(format!(
            "{} anchors, need 3",
            anchors.len()
        )));
    }
    let mut m = Matrix3::<f64>::zeros();
    let mut b_rot = Vector3::<f64>::zeros();
    let mut b_spin = Vector3::<f64>::zeros();
    for (id, truth) in anchors {
        let solved = sources.get(*id as usize).ok_or_else(|| {
            SolveError::DegenerateAnchors(format!("anchor {id} not in the catalog"))
        })?;
        let tri = local_triad(truth.alpha, truth.delta);
        let d = solved.difference(truth);
        // Δα* = ε·q, Δδ = −ε·p; the same relation holds for the spin
        m += Matrix3::identity() - tri.r * tri.r.transpose();
        b_rot += tri.q * d[0] - tri.p * d[1];
        b_spin += tri.q * d[3] - tri.p * d[4];
    }
    let eig = nalgebra::SymmetricEigen::new(m).eigenvalues;
    if !(eig.min() > 0.0) || eig.max() / eig.min() > MAX_ANCHOR_CONDITION {
        return Err(SolveError::DegenerateAnchors(
            "anchor directions are collinear".into(),
        ));
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| SolveError::DegenerateAnchors("singular anchor matrix".into()))?;
    Ok(FrameCorrection {
        rotation: chol.solve(&b_rot),
        spin: chol.solve(&b_spin),
        n_anchors: anchors.len(),
    })
}

fn derotate(s: &SourceParams, rot: &Rotation3<f64>, spin: &Vector3<f64>) -> SourceParams {
    let tri = local_triad(s.alpha, s.delta);
    let r = rot * tri.r;
    let m = rot * (tri.p * (s.pm_alpha_star * MAS) + tri.q * (s.pm_delta * MAS)) - spin.cross(&r);
    let delta = r[2].clamp(-1.0, 1.0).asin();
    let alpha = wrap_two_pi(r[1].atan2(r[0]));
    let new = local_triad(alpha, delta);
    SourceParams {
        alpha,
        delta,
        pm_alpha_star: m.dot(&new.p) / MAS,
        pm_delta: m.dot(&new.q) / MAS,
        ..*s
    }
}

/// Remove the rotation and spin between the solution and the anchors from
/// every source and from the attitude. Calibration and global parameters are
/// untouched.
pub fn frame_align(
    state: &SolverState,
    anchors: &[(SourceId, SourceParams)],
    law: &ScanLaw,
) -> Result<(SolverState, FrameCorrection), SolveError> {
    let mut correction = FrameCorrection {
        rotation: Vector3::zeros(),
        spin: Vector3::zeros(),
        n_anchors: anchors.len(),
    };
    let mut out = state.clone();
    let epoch = anchors.first().map(|a| a.1.epoch).unwrap_or(0.0);
    // the linear estimate of a finite rotation is refined by a second pass
    for pass in 0..3 {
        let c = estimate_frame(&out.sources, anchors)?;
        if pass > 0 && c.rotation.amax() < 1e-15 && c.spin.amax() < 1e-15 {
            break;
        }
        let rot = Rotation3::new(-c.rotation);
        out.sources = out
            .sources
            .iter()
            .map(|s| derotate(s, &rot, &c.spin))
            .collect();
        for (k, coeff) in out.attitude.coeffs.iter_mut().enumerate() {
            let t = state.attitude.knot_time(k);
            let tau = (t - epoch) / DAYS_PER_YEAR;
            *coeff -= (c.rotation + c.spin * tau).dot(&law.spin_axis(t));
        }
        correction.rotation += c.rotation;
        correction.spin += c.spin;
    }
    Ok((out, correction))
}

//! Dense joint least-squares reference for the block-iterative solution.

use agis_core::model::{observation_partials, ObsMeta, Observation};
use agis_core::simulator::ScanLaw;
use agis_core::solver::SolverState;
use nalgebra::{DMatrix, DVector};

/// Gauss–Newton on the stacked system, with Σ calibration = 0 imposed by a
/// Lagrange multiplier.
pub fn dense_solution(obs: &[Observation], law: &ScanLaw, start: &SolverState) -> SolverState {
    let ns = start.sources.len();
    let nk = start.attitude.n_knots();
    let nu = start.calibration.len();
    let (ia, ic, ig) = (5 * ns, 5 * ns + nk, 5 * ns + nk + nu);
    let np = ig + 1;
    let mut x = start.clone();
    for _ in 0..10 {
        let mut n = DMatrix::<f64>::zeros(np + 1, np + 1);
        let mut b = DVector::<f64>::zeros(np + 1);
        for o in obs {
            let s = &x.sources[o.source_id as usize];
            let d = observation_partials(
                s,
                &x.attitude,
                &x.calibration,
                &x.global,
                &ObsMeta::from(o),
                law,
            )
            .unwrap();
            let mut row = DVector::<f64>::zeros(np + 1);
            for k in 0..5 {
                row[5 * o.source_id as usize + k] = d.source[k];
            }
            for (k, a) in d.attitude {
                row[ia + k] += a;
            }
            row[ic + d.calib.0 as usize] = d.calib.1;
            row[ig] = d.global;
            let w = 1.0 / (o.sigma * o.sigma);
            let r = o.abscissa_obs - d.predicted;
            n += &row * row.transpose() * w;
            b += &row * (w * r);
        }
        for u in 0..nu {
            n[(np, ic + u)] = 1.0;
            n[(ic + u, np)] = 1.0;
        }
        b[np] = -x.calibration.offsets.iter().sum::<f64>();
        let delta = n.lu().solve(&b).expect("joint system is regular");
        for (i, s) in x.sources.iter_mut().enumerate() {
            let d = delta.rows(5 * i, 5);
            *s = s.apply_update(&[d[0], d[1], d[2], d[3], d[4]]);
        }
        for k in 0..nk {
            x.attitude.coeffs[k] += delta[ia + k];
        }
        for u in 0..nu {
            x.calibration.offsets[u] += delta[ic + u];
        }
        x.global.g += delta[ig];
        let step = delta.rows(0, np).amax();
        if step < 1e-15 {
            break;
        }
    }
    x
}

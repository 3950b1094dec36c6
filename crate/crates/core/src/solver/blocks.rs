use super::banded::banded_cholesky_solve;
use super::{BlockKind, BlockPartials, PartialNormalEquations, SolveError};

/// Starting Levenberg damping as a fraction of the matrix trace.
pub const ATTITUDE_DAMPING: f64 = 1e-12;
const DAMPING_RETRIES: usize = 2;

fn check(p: &PartialNormalEquations, kind: BlockKind) -> Result<(), SolveError> {
    if p.kind != kind {
        return Err(SolveError::SingularBlock {
            kind,
            detail: format!("got {:?} accumulator", p.kind),
        });
    }
    if let Some(i) = p.first_non_finite() {
        return Err(SolveError::NonFinite(format!(
            "{kind:?} normal equations, entry {i}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttitudeDelta {
    pub delta: Vec<f64>,
    /// Knots whose normal-matrix row is empty; their update is zero.
    pub unconstrained_knots: Vec<usize>,
    pub damping: f64,
}

/// Solve `(N + λI) Δ = rhs` for the attitude knots. `damping` is λ relative
/// to the trace of `N`; it is raised ×10 up to twice if the factorisation
/// fails.
pub fn attitude_update(
    p: &PartialNormalEquations,
    damping: f64,
) -> Result<AttitudeDelta, SolveError> {
    check(p, BlockKind::Attitude)?;
    let unconstrained_knots: Vec<usize> = (0..p.n).filter(|&i| p.get(i, i) == 0.0).collect();
    let trace = p.trace();
    let mut lambda = damping * trace;
    let stride = p.bandwidth + 1;
    for attempt in 0..=DAMPING_RETRIES {
        let mut band = p.matrix.clone();
        for i in 0..p.n {
            band[i * stride] += lambda;
        }
        match banded_cholesky_solve(p.n, p.bandwidth, &band, &p.rhs) {
            Ok(delta) => {
                return Ok(AttitudeDelta {
                    delta,
                    unconstrained_knots,
                    damping: lambda,
                })
            }
            Err(e) if attempt == DAMPING_RETRIES => {
                return Err(SolveError::SingularBlock {
                    kind: BlockKind::Attitude,
                    detail: format!("{e} with damping {lambda:.3e}"),
                })
            }
            Err(_) => lambda *= 10.0,
        }
    }
    unreachable!()
}

/// Per-unit solve followed by removal of the mean update.
pub fn calibration_update(
    p: &PartialNormalEquations,
    allow_empty_units: bool,
) -> Result<Vec<f64>, SolveError> {
    check(p, BlockKind::Calibration)?;
    let mut delta = Vec::with_capacity(p.n);
    for u in 0..p.n {
        let m = p.get(u, u);
        if m > 0.0 {
            delta.push(p.rhs[u] / m);
        } else if allow_empty_units {
            delta.push(0.0);
        } else {
            return Err(SolveError::SingularBlock {
                kind: BlockKind::Calibration,
                detail: format!("unit {u} has no observations"),
            });
        }
    }
    if !delta.is_empty() {
        let mean = delta.iter().sum::<f64>() / delta.len() as f64;
        delta.iter_mut().for_each(|d| *d -= mean);
    }
    Ok(delta)
}

pub fn global_update(p: &PartialNormalEquations) -> Result<f64, SolveError> {
    check(p, BlockKind::Global)?;
    if p.n != 1 {
        return Err(SolveError::SingularBlock {
            kind: BlockKind::Global,
            detail: format!("expected 1 parameter, got {}", p.n),
        });
    }
    let m = p.get(0, 0);
    if !(m > 0.0) {
        return Err(SolveError::SingularBlock {
            kind: BlockKind::Global,
            detail: format!("normal matrix {m}"),
        });
    }
    Ok(p.rhs[0] / m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDeltas {
    pub attitude: AttitudeDelta,
    pub calibration: Vec<f64>,
    pub global: f64,
}

/// Attitude, then calibration, then global update, each against the
/// residuals left by the ones before it. The later right-hand sides are
/// corrected through the cross terms instead of re-accumulating.
pub fn sequential_block_updates(
    p: &BlockPartials,
    damping: f64,
    allow_empty_calib_units: bool,
) -> Result<BlockDeltas, SolveError> {
    let x = &p.cross;
    if x.n_knots != p.attitude.n || x.n_units != p.calibration.n {
        return Err(SolveError::InvalidConfig(
            "cross terms do not match the blocks".into(),
        ));
    }
    if let Some((name, i)) = x.first_non_finite() {
        return Err(SolveError::NonFinite(format!(
            "{name} cross terms, entry {i}"
        )));
    }
    let attitude = attitude_update(&p.attitude, damping)?;
    let da = &attitude.delta;

    let mut cal = p.calibration.clone();
    for (k, d) in da.iter().enumerate().filter(|(_, d)| **d != 0.0) {
        let row = &x.ac[k * x.n_units..(k + 1) * x.n_units];
        for (r, c) in cal.rhs.iter_mut().zip(row) {
            *r -= c * d;
        }
    }
    let calibration = calibration_update(&cal, allow_empty_calib_units)?;

    let mut glob = p.global.clone();
    glob.rhs[0] -= x.ag.iter().zip(da).map(|(c, d)| c * d).sum::<f64>();
    glob.rhs[0] -=
        x.cg.iter()
            .zip(&calibration)
            .map(|(c, d)| c * d)
            .sum::<f64>();
    let global = global_update(&glob)?;
    Ok(BlockDeltas {
        attitude,
        calibration,
        global,
    })
}

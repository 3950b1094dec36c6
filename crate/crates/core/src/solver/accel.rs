//! Anderson extrapolation of the outer iteration.
//!
//! The outer iteration is a fixed-point map `x ↦ G(x)`. Its slowest modes
//! (source and attitude errors that nearly cancel in the residuals) decay by
//! only a few percent per pass. Anderson mixing combines the last `depth`
//! iterates so that, on a linear map, the sequence matches GMRES on the same
//! system. It needs no extra pass over the observations.
//!
//! States are flattened in a fixed chart: source offsets relative to a
//! reference state in rad-equivalents, attitude and calibration in rad, and
//! `g` scaled to the angle it produces.

use nalgebra::{DMatrix, DVector};

use super::{SolveError, SolverState};
use crate::io::codec::{DecodeError, Decoder, Encoder};
use crate::io::{decode_state, encode_state};

/// Singular values below this fraction of the largest are dropped.
const RCOND: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Anderson {
    pub depth: usize,
    /// Angle per unit of `g`.
    g_scale: f64,
    reference: Option<SolverState>,
    /// Flattened `(x_i, G(x_i))` pairs, oldest first.
    history: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Anderson {
    pub fn new(depth: usize, g_scale: f64) -> Self {
        Anderson {
            depth,
            g_scale,
            reference: None,
            history: Vec::new(),
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn reset(&mut self) {
        self.reference = None;
        self.history.clear();
    }

    fn flatten(&self, s: &SolverState) -> Vec<f64> {
        let r = self.reference.as_ref().expect("reference set");
        let mut v =
            Vec::with_capacity(5 * r.n_primary + s.attitude.coeffs.len() + s.calibration.len() + 1);
        for (a, b) in s.sources[..r.n_primary].iter().zip(&r.sources) {
            v.extend_from_slice(&a.difference(b));
        }
        v.extend(
            s.attitude
                .coeffs
                .iter()
                .zip(&r.attitude.coeffs)
                .map(|(a, b)| a - b),
        );
        v.extend(
            s.calibration
                .offsets
                .iter()
                .zip(&r.calibration.offsets)
                .map(|(a, b)| a - b),
        );
        v.push((s.global.g - r.global.g) * self.g_scale);
        v
    }

    fn unflatten(&self, v: &[f64], template: &SolverState) -> SolverState {
        let r = self.reference.as_ref().expect("reference set");
        let mut out = template.clone();
        let np = r.n_primary;
        for (i, s) in out.sources[..np].iter_mut().enumerate() {
            let d = &v[5 * i..5 * i + 5];
            *s = r.sources[i].apply_update(&[d[0], d[1], d[2], d[3], d[4]]);
        }
        let mut k = 5 * np;
        for (c, base) in out.attitude.coeffs.iter_mut().zip(&r.attitude.coeffs) {
            *c = base + v[k];
            k += 1;
        }
        for (c, base) in out
            .calibration
            .offsets
            .iter_mut()
            .zip(&r.calibration.offsets)
        {
            *c = base + v[k];
            k += 1;
        }
        out.global.g = r.global.g + v[k] / self.g_scale;
        out
    }

    fn compatible(&self, s: &SolverState) -> bool {
        self.reference.as_ref().is_some_and(|r| {
            r.n_primary == s.n_primary
                && r.sources.len() == s.sources.len()
                && r.attitude.coeffs.len() == s.attitude.coeffs.len()
                && r.calibration.len() == s.calibration.len()
        })
    }

    /// Record the pass `x → g` and return the extrapolated next iterate.
    /// With fewer than two recorded passes, or `depth == 0`, that is `g`.
    pub fn step(&mut self, x: &SolverState, g: &SolverState) -> Result<SolverState, SolveError> {
        if self.depth == 0 {
            return Ok(g.clone());
        }
        if !self.compatible(x) {
            self.reset();
            self.reference = Some(x.clone());
        }
        let pair = (self.flatten(x), self.flatten(g));
        self.history.push(pair);
        if self.history.len() > self.depth + 1 {
            self.history.remove(0);
        }
        let m = self.history.len() - 1;
        if m == 0 {
            return Ok(g.clone());
        }
        let n = self.history[0].0.len();
        let f = |i: usize| -> Vec<f64> {
            let (x, g) = &self.history[i];
            g.iter().zip(x).map(|(a, b)| a - b).collect()
        };
        let fk = DVector::from_vec(f(m));
        let mut df = DMatrix::<f64>::zeros(n, m);
        let mut dg = DMatrix::<f64>::zeros(n, m);
        let mut f_prev = f(0);
        for j in 0..m {
            let f_next = f(j + 1);
            for i in 0..n {
                df[(i, j)] = f_next[i] - f_prev[i];
                dg[(i, j)] = self.history[j + 1].1[i] - self.history[j].1[i];
            }
            f_prev = f_next;
        }
        let svd = df.svd(true, true);
        let cutoff = RCOND * svd.singular_values.max();
        let gamma = match svd.solve(&fk, cutoff) {
            Ok(gm) if gm.iter().all(|c| c.is_finite()) => gm,
            _ => {
                // degenerate history: restart from the plain iterate
                self.reset();
                return Ok(g.clone());
            }
        };
        let mut next = DVector::from_column_slice(&self.history[m].1);
        next -= dg * gamma;
        let out = self.unflatten(next.as_slice(), g);
        if let Some(loc) = out.first_non_finite() {
            return Err(SolveError::NonFinite(format!("extrapolated state, {loc}")));
        }
        Ok(out)
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u64(self.depth as u64).f64(self.g_scale);
        match &self.reference {
            None => {
                e.u8(0);
            }
            Some(r) => {
                e.u8(1);
                encode_state(e, r);
            }
        }
        e.u64(self.history.len() as u64);
        for (x, g) in &self.history {
            e.f64s(x).f64s(g);
        }
    }

    pub fn decode(d: &mut Decoder) -> Result<Self, DecodeError> {
        let depth = d.u64()? as usize;
        let g_scale = d.f64()?;
        let reference = match d.u8()? {
            0 => None,
            1 => Some(decode_state(d)?),
            _ => return Err(DecodeError(d.position())),
        };
        let len = d.u64()? as usize;
        if len > depth + 1 || (len > 0 && reference.is_none()) {
            return Err(DecodeError(d.position()));
        }
        let mut history = Vec::with_capacity(len);
        for _ in 0..len {
            history.push((d.f64s()?, d.f64s()?));
        }
        Ok(Anderson {
            depth,
            g_scale,
            reference,
            history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::TruthCatalog;
    use crate::solver::{AttitudeModel, CalibrationTable, GlobalParams};

    fn state(n: usize) -> SolverState {
        SolverState {
            iteration: 0,
            sources: TruthCatalog::generate(n, 5.0, 2).sources,
            n_primary: n,
            attitude: AttitudeModel::zeros(0.0, 2.0, 0.5),
            calibration: CalibrationTable::zeros(3),
            global: GlobalParams::default(),
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut acc = Anderson::new(3, 1e-4);
        let r = state(4);
        acc.reference = Some(r.clone());
        let mut s = r.clone();
        s.sources[2] = s.sources[2].apply_update(&[1e-7, -2e-7, 3e-8, 0.0, 1e-9]);
        s.attitude.coeffs[1] = 2e-8;
        s.calibration.offsets[0] = -1e-9;
        s.global.g = 2e-5;
        let v = acc.flatten(&s);
        let back = acc.unflatten(&v, &r);
        assert!(back.sources[2]
            .difference(&s.sources[2])
            .iter()
            .all(|d| d.abs() < 1e-15));
        assert_eq!(back.attitude, s.attitude);
        assert!((back.global.g - 2e-5).abs() < 1e-15);
    }

    /// On a linear contraction `x ↦ Mx + c` in 2-d the accelerated sequence
    /// reaches the fixed point after two recorded passes.
    #[test]
    fn linear_map_converges_in_few_steps() {
        let base = state(0);
        let apply = |s: &SolverState| {
            let mut out = s.clone();
            let (a, b) = (s.attitude.coeffs[0], s.attitude.coeffs[1]);
            out.attitude.coeffs[0] = 0.99 * a + 0.005 * b + 1e-6;
            out.attitude.coeffs[1] = 0.002 * a + 0.95 * b - 2e-6;
            out
        };
        let mut acc = Anderson::new(4, 1.0);
        let mut x = base.clone();
        for _ in 0..4 {
            let g = apply(&x);
            x = acc.step(&x, &g).unwrap();
        }
        let fixed = apply(&x);
        assert!(
            (fixed.attitude.coeffs[0] - x.attitude.coeffs[0]).abs() < 1e-15,
            "{:?} {:?}",
            fixed.attitude.coeffs,
            x.attitude.coeffs
        );
        assert!((fixed.attitude.coeffs[1] - x.attitude.coeffs[1]).abs() < 1e-15);
    }

    #[test]
    fn depth_zero_is_plain_iteration() {
        let mut acc = Anderson::new(0, 1.0);
        let x = state(3);
        let mut g = x.clone();
        g.global.g = 1e-3;
        assert_eq!(acc.step(&x, &g).unwrap(), g);
        assert_eq!(acc.history_len(), 0);
    }

    #[test]
    fn encode_round_trip() {
        let mut acc = Anderson::new(2, 1e-4);
        let x = state(3);
        let mut g = x.clone();
        g.attitude.coeffs[0] = 1e-7;
        acc.step(&x, &g).unwrap();
        let mut e = Encoder::new();
        acc.encode(&mut e);
        let back = Anderson::decode(&mut Decoder::new(&e.buf)).unwrap();
        assert_eq!(back, acc);
    }
}

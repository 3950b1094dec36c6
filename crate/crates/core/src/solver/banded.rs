//! Cholesky factorisation of symmetric positive-definite band matrices.
//!
//! Storage is lower-band row major: entry `(i, i − k)` for `k = 0..=w` lives
//! at `data[i * (w + 1) + k]`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BandedError {
    #[error("matrix not positive definite at row {0}")]
    NotPositiveDefinite(usize),
    #[error("band storage has {got} entries, expected {expected}")]
    Shape { got: usize, expected: usize },
}

/// Solve `A x = b` where `A` is given in lower-band storage with `w`
/// sub-diagonals.
pub fn banded_cholesky_solve(
    n: usize,
    w: usize,
    band: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, BandedError> {
    let stride = w + 1;
    if band.len() != n * stride || rhs.len() != n {
        return Err(BandedError::Shape {
            got: band.len(),
            expected: n * stride,
        });
    }
    let mut l = vec![0.0; n * stride];
    let at = |i: usize, j: usize| i * stride + (i - j);
    for i in 0..n {
        let j0 = i.saturating_sub(w);
        for j in j0..=i {
            let k0 = j0.max(j.saturating_sub(w));
            let mut sum = band[at(i, j)];
            for k in k0..j {
                sum -= l[at(i, k)] * l[at(j, k)];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(BandedError::NotPositiveDefinite(i));
                }
                l[at(i, i)] = sum.sqrt();
            } else {
                l[at(i, j)] = sum / l[at(j, j)];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = rhs[i];
        for k in i.saturating_sub(w)..i {
            sum -= l[at(i, k)] * y[k];
        }
        y[i] = sum / l[at(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..(i + w + 1).min(n) {
            sum -= l[at(k, i)] * x[k];
        }
        x[i] = sum / l[at(i, i)];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn to_dense(n: usize, w: usize, band: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in 0..=w.min(i) {
                m[(i, i - k)] = band[i * (w + 1) + k];
                m[(i - k, i)] = band[i * (w + 1) + k];
            }
        }
        m
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let n = 6;
        let mut band = vec![0.0; n * 2];
        for i in 0..n {
            band[i * 2] = 4.0 + i as f64;
            if i > 0 {
                band[i * 2 + 1] = -1.0 + 0.1 * i as f64;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = banded_cholesky_solve(n, 1, &band, &rhs).unwrap();
        let dense = to_dense(n, 1, &band);
        let xd = dense.lu().solve(&DVector::from_vec(rhs)).unwrap();
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn indefinite_rejected() {
        let band = vec![1.0, 0.0, 1.0, 2.0];
        assert_eq!(
            banded_cholesky_solve(2, 1, &band, &[1.0, 1.0]),
            Err(BandedError::NotPositiveDefinite(1))
        );
        assert!(banded_cholesky_solve(2, 1, &band[..3], &[1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn random_spd_band(n in 1usize..30, w in 0usize..4, seed in 0u64..1000) {
            // diagonally dominant band matrix
            let mut band = vec![0.0; n * (w + 1)];
            let mut s = seed as f64;
            let mut next = || { s = (s * 1.618_033_988 + 0.314_159).fract(); s - 0.5 };
            for i in 0..n {
                for k in 1..=w.min(i) {
                    band[i * (w + 1) + k] = next();
                }
                band[i * (w + 1)] = 2.0 * (w as f64 + 1.0) + next();
            }
            let rhs: Vec<f64> = (0..n).map(|_| next()).collect();
            let x = banded_cholesky_solve(n, w, &band, &rhs).unwrap();
            let r = to_dense(n, w, &band) * DVector::from_vec(x) - DVector::from_vec(rhs);
            prop_assert!(r.amax() < 1e-12);
        }
    }
}

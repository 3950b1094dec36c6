use nalgebra::Vector3;

use super::ScanLaw;
use crate::model::{apply_aberration, local_triad, propagate_direction, Fov, SourceParams};
use crate::units::{wrap_pi, DAYS_PER_YEAR};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transit {
    pub t: f64,
    pub fov: Fov,
    pub calib_unit: u16,
}

/// Apparent direction with unit aberration scale.
fn apparent(law: &ScanLaw, s: &SourceParams, t: f64) -> Vector3<f64> {
    let obs = law.orbit.observer(t);
    let u = propagate_direction(s, t, &obs).expect("finite source");
    apply_aberration(&u, &obs.velocity, 0.0).expect("finite state")
}

/// Nominal along-scan angle of `s` relative to the centre of `fov`, and the
/// across-scan angle, both in rad.
pub fn along_scan_angle(law: &ScanLaw, s: &SourceParams, fov: Fov, t: f64) -> (f64, f64) {
    let frame = law.nominal_attitude(t).expect("t inside mission");
    let x = frame * apparent(law, s, t);
    let eta = wrap_pi(x[1].atan2(x[0]) - fov.centre(law.basic_angle));
    (eta, x[2].clamp(-1.0, 1.0).asin())
}

/// Upper bound on |d(spin axis)/dt| in rad/day.
fn spin_axis_rate(law: &ScanLaw) -> f64 {
    let orbital = 2.0 * std::f64::consts::PI / DAYS_PER_YEAR;
    let (sx, cx) = law.solar_aspect.sin_cos();
    orbital * (cx + sx) + law.precession_rate.abs() * sx
}

/// All field transits of `s` inside `window`, in time order.
///
/// A coarse pass over the spin-axis motion (one sample per spin period)
/// discards times when the source is far from the scan circle. Inside the
/// remaining stretches the along-scan angle is sampled every 1/8 spin period
/// and each sign change is refined by bisection.
pub fn generate_transits(law: &ScanLaw, s: &SourceParams, window: (f64, f64)) -> Vec<Transit> {
    let (w0, w1) = (
        window.0.max(law.mission_start),
        window.1.min(law.mission_end),
    );
    let mut out = Vec::new();
    if !(w1 > w0) {
        return out;
    }
    let period = law.spin_period();
    let coarse = period;
    // aberration and parallax move the source by < 2e-4 rad
    let margin = 1.5 * spin_axis_rate(law) * 0.5 * coarse + 2e-4;
    let band = law.across_scan_half_width.sin() + margin;
    let r = local_triad(s.alpha, s.delta).r;

    let n_coarse = ((w1 - w0) / coarse).ceil() as usize + 1;
    let mut runs: Vec<(f64, f64)> = Vec::new();
    for k in 0..n_coarse {
        let tc = (w0 + k as f64 * coarse).min(w1);
        if r.dot(&law.spin_axis(tc)).abs() < band {
            let lo = (tc - 0.5 * coarse).max(w0);
            let hi = (tc + 0.5 * coarse).min(w1);
            match runs.last_mut() {
                Some(last) if lo <= last.1 => last.1 = hi,
                _ => runs.push((lo, hi)),
            }
        }
    }

    let fine = period / 8.0;
    for (lo, hi) in runs {
        let n = ((hi - lo) / fine).ceil().max(1.0) as usize;
        let step = (hi - lo) / n as f64;
        for fov in [Fov::Preceding, Fov::Following] {
            let f = |t: f64| along_scan_angle(law, s, fov, t).0;
            let mut t_prev = lo;
            let mut e_prev = f(lo);
            for i in 1..=n {
                let t_next = if i == n { hi } else { lo + i as f64 * step };
                let e_next = f(t_next);
                let near = e_prev.abs() < std::f64::consts::FRAC_PI_2
                    && e_next.abs() < std::f64::consts::FRAC_PI_2;
                // roots on a sample are attributed to the interval they end
                if near && e_prev > 0.0 && e_next <= 0.0 || near && e_prev < 0.0 && e_next >= 0.0 {
                    let t = bisect(&f, t_prev, t_next, e_prev);
                    let (eta, zeta) = along_scan_angle(law, s, fov, t);
                    if zeta.abs() < law.across_scan_half_width && eta.abs() < 1e-9 {
                        out.push(Transit {
                            t,
                            fov,
                            calib_unit: law.calib_unit(fov, t),
                        });
                    }
                }
                t_prev = t_next;
                e_prev = e_next;
            }
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    out.dedup_by(|a, b| a.fov == b.fov && (a.t - b.t).abs() < 1e-9);
    out
}

fn bisect(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, mut f_lo: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (f_lo > 0.0) {
            lo = mid;
            f_lo = fm;
        } else {
            hi = mid;
        }
    }
    // endpoint with the smaller residual
    if f(lo).abs() <= f(hi).abs() {
        lo
    } else {
        hi
    }
}

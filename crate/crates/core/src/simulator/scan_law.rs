use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::model::{Ephemeris, Fov, ModelError};
use crate::units::wrap_two_pi;

/// Uniform spin plus uniform precession of the spin axis around the Sun
/// direction at a fixed solar aspect angle.
///
/// The instrument x axis sits at spin phase `Ω` from the ascending node of
/// the scan great circle on the orbital plane; the preceding and following
/// fields are at instrument longitudes `±Γ/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanLaw {
    /// rad/day
    pub spin_rate: f64,
    /// rad/day
    pub precession_rate: f64,
    /// rad
    pub solar_aspect: f64,
    /// rad
    pub basic_angle: f64,
    pub mission_start: f64,
    pub mission_end: f64,
    /// Half width of the across-scan acceptance band, rad.
    pub across_scan_half_width: f64,
    pub spin_phase0: f64,
    pub precession_phase0: f64,
    /// Spin-phase buckets per field of view for calibration units.
    pub calib_phase_buckets: u16,
    pub orbit: Ephemeris,
}

/// 5 Julian years.
pub const DEFAULT_MISSION_DAYS: f64 = 5.0 * 365.25;

impl Default for ScanLaw {
    fn default() -> Self {
        Self {
            // 60 arcsec/s
            spin_rate: 4.0 * 2.0 * PI,
            // 5.8 revolutions per year
            precession_rate: 5.8 * 2.0 * PI / 365.25,
            solar_aspect: 45f64.to_radians(),
            basic_angle: 106.5f64.to_radians(),
            mission_start: 0.0,
            mission_end: DEFAULT_MISSION_DAYS,
            across_scan_half_width: DEFAULT_ACROSS_SCAN_HALF_WIDTH,
            spin_phase0: 0.0,
            precession_phase0: 0.0,
            calib_phase_buckets: 8,
            orbit: Ephemeris::default(),
        }
    }
}

/// Tuned so that the default five-year law gives about 80 field transits
/// per source.
pub const DEFAULT_ACROSS_SCAN_HALF_WIDTH: f64 = 0.3138 * PI / 180.0;

impl ScanLaw {
    pub fn validate(&self) -> Result<(), String> {
        let finite = [
            self.spin_rate,
            self.precession_rate,
            self.solar_aspect,
            self.basic_angle,
            self.mission_start,
            self.mission_end,
            self.across_scan_half_width,
            self.spin_phase0,
            self.precession_phase0,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err("scan law has non-finite parameters".into());
        }
        if !(self.basic_angle > 0.0 && self.basic_angle < PI) {
            return Err(format!("basic angle {} outside (0, π)", self.basic_angle));
        }
        if self.mission_end <= self.mission_start {
            return Err("mission_end must exceed mission_start".into());
        }
        if self.spin_rate <= 0.0 {
            return Err("spin rate must be positive".into());
        }
        if !(self.solar_aspect > 0.0 && self.solar_aspect < PI / 2.0) {
            return Err("solar aspect must be in (0, π/2)".into());
        }
        if self.across_scan_half_width <= 0.0 {
            return Err("across-scan half width must be positive".into());
        }
        if self.calib_phase_buckets == 0 {
            return Err("need at least one calibration phase bucket".into());
        }
        Ok(())
    }

    pub fn spin_period(&self) -> f64 {
        2.0 * PI / self.spin_rate
    }

    pub fn n_calib_units(&self) -> usize {
        2 * self.calib_phase_buckets as usize
    }

    fn check_span(&self, t: f64) -> Result<(), ModelError> {
        if t.is_nan() {
            return Err(ModelError::NonFiniteInput("time"));
        }
        if t < self.mission_start || t > self.mission_end {
            return Err(ModelError::OutOfMissionSpan {
                t,
                start: self.mission_start,
                end: self.mission_end,
            });
        }
        Ok(())
    }

    pub fn spin_phase(&self, t: f64) -> f64 {
        self.spin_phase0 + self.spin_rate * (t - self.mission_start)
    }

    pub fn precession_phase(&self, t: f64) -> f64 {
        self.precession_phase0 + self.precession_rate * (t - self.mission_start)
    }

    /// Spin axis in the celestial frame.
    pub fn spin_axis(&self, t: f64) -> Vector3<f64> {
        let sun = self.orbit.sun_direction(t);
        let e1 = Vector3::z();
        let e2 = sun.cross(&e1);
        let (sn, cn) = self.precession_phase(t).sin_cos();
        let (sx, cx) = self.solar_aspect.sin_cos();
        sun * cx + (e1 * cn + e2 * sn) * sx
    }

    /// Rotation from the celestial frame to the nominal instrument frame.
    pub fn nominal_attitude(&self, t: f64) -> Result<Matrix3<f64>, ModelError> {
        self.check_span(t)?;
        let z = self.spin_axis(t);
        let node = Vector3::z().cross(&z).normalize();
        let m = z.cross(&node);
        let (so, co) = self.spin_phase(t).sin_cos();
        let x = node * co + m * so;
        let y = z.cross(&x);
        Ok(Matrix3::from_rows(&[
            x.transpose(),
            y.transpose(),
            z.transpose(),
        ]))
    }

    /// Calibration unit for a transit in `fov` at time `t`.
    pub fn calib_unit(&self, fov: Fov, t: f64) -> u16 {
        let n = self.calib_phase_buckets as f64;
        let bucket = (wrap_two_pi(self.spin_phase(t)) / (2.0 * PI) * n).floor() as u16;
        fov.index() as u16 * self.calib_phase_buckets + bucket.min(self.calib_phase_buckets - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    #[test]
    fn frame_is_rotation() {
        let law = ScanLaw::default();
        for i in 0..200 {
            let t = law.mission_start + (law.mission_end - law.mission_start) * i as f64 / 199.0;
            let r = law.nominal_attitude(t).unwrap();
            assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_frame() {
        // At t = start the Sun is at −x, the spin axis leans 45° from it
        // towards +z, and the instrument x axis points at the ascending node.
        let law = ScanLaw::default();
        let r = law.nominal_attitude(law.mission_start).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let z = Vector3::new(-s, 0.0, s);
        assert!((r.row(2).transpose() - z).norm() < 1e-15);
        let node = Vector3::z().cross(&z).normalize();
        assert!((r.row(0).transpose() - node).norm() < 1e-15);
        assert!((node - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn span_enforced() {
        let law = ScanLaw::default();
        assert!(matches!(
            law.nominal_attitude(-1.0),
            Err(ModelError::OutOfMissionSpan { .. })
        ));
    }

    /// Builds the frame as a product of elementary rotations and checks that a
    /// full spin period only advances the precession/orbit angles.
    #[test]
    fn spin_period_composes_precession_increment() {
        let law = ScanLaw::default();
        let euler = |t: f64| -> Matrix3<f64> {
            // spin axis from composed rotations: start on +z, tilt by the
            // solar aspect towards the Sun, rotate about the Sun by ν,
            // place the Sun at its orbital longitude
            let lam = law.orbit.longitude(t);
            let nu = law.precession_phase(t);
            let to_sun = Rotation3::from_axis_angle(&Vector3::z_axis(), lam + PI);
            let about_sun = Rotation3::from_axis_angle(&Vector3::x_axis(), nu);
            let tilt = Rotation3::from_axis_angle(&Vector3::y_axis(), PI / 2.0 - law.solar_aspect);
            let z = to_sun * about_sun * tilt * Vector3::z();
            // scan-circle node longitude and inclination
            let node_lon = z[0].atan2(-z[1]);
            let incl = z[2].acos();
            let omega = law.spin_phase(t);
            let r = Rotation3::from_axis_angle(&Vector3::z_axis(), -omega)
                * Rotation3::from_axis_angle(&Vector3::x_axis(), -incl)
                * Rotation3::from_axis_angle(&Vector3::z_axis(), -node_lon);
            r.into_inner()
        };
        for &t in &[0.0, 1.3, 400.0, 1500.7] {
            let a = law.nominal_attitude(t).unwrap();
            assert!((a - euler(t)).norm() < 1e-12, "t={t}");
            let tp = t + law.spin_period();
            let b = law.nominal_attitude(tp).unwrap();
            // same spin phase, advanced precession and orbit
            let inc = b * a.transpose();
            let expected = euler(tp) * euler(t).transpose();
            assert!((inc - expected).norm() < 1e-11);
            // frame(t+P) = increment ∘ frame(t)
            assert!((inc * a - b).norm() < 1e-12);
            // the increment is small: one precession step plus orbital motion
            let angle = Rotation3::from_matrix_unchecked(inc).angle();
            let bound = (law.precession_rate + 2.0 * PI / 365.25) * law.spin_period() * 1.01;
            assert!(angle < bound, "increment {angle} > {bound}");
        }
    }

    #[test]
    fn calib_units_dense() {
        let law = ScanLaw::default();
        let mut seen = vec![false; law.n_calib_units()];
        for i in 0..64 {
            let t = i as f64 * law.spin_period() / 16.0 + 1e-6;
            seen[law.calib_unit(Fov::Preceding, t) as usize] = true;
            seen[law.calib_unit(Fov::Following, t) as usize] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }
}

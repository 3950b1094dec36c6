//! Astrometric propagation and the along-scan measurement equation.
//!
//! Conventions, fixed here and nowhere else:
//!
//! * The local triad is `r = (cos δ cos α, cos δ sin α, sin δ)`,
//!   `p = (−sin α, cos α, 0)`, `q = r × p` rotated so that `r = p × q`.
//! * Parallactic displacement is `−ϖ·b⊥`, with `b⊥` the observer offset (AU)
//!   projected on the tangent plane of the source.
//! * The along-scan field angle is `η = wrap(φ − φ_fov − δφ(t)) + c_unit`:
//!   `φ` is the instrument longitude of the apparent direction, `φ_fov` is
//!   `+Γ/2` for the preceding and `−Γ/2` for the following field, `δφ` the
//!   attitude phase correction and `c_unit` the calibration offset.
//! * Partial derivatives are taken with respect to rad-equivalent unknowns
//!   `(α*, δ, ϖ, μα*, μδ)` in (rad, rad, rad, rad/yr, rad/yr), `α* = α cos δ`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::ScanLaw;
use crate::solver::{AttitudeModel, CalibrationTable, GlobalParams};
use crate::units::{wrap_pi, wrap_two_pi, AU_KM, C_KMS, DAYS_PER_YEAR, MAS, SECONDS_PER_DAY};

pub type SourceId = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("time {t} outside attitude knot span [{start}, {end}]")]
    OutOfAttitudeSpan { t: f64, start: f64, end: f64 },
    #[error("time {t} outside mission span [{start}, {end}]")]
    OutOfMissionSpan { t: f64, start: f64, end: f64 },
}

/// Six astrometric parameters of one source; five of them are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    /// Right ascension, rad, in `[0, 2π)`.
    pub alpha: f64,
    /// Declination, rad.
    pub delta: f64,
    /// mas.
    pub parallax: f64,
    /// mas/yr, includes the cos δ factor.
    pub pm_alpha_star: f64,
    /// mas/yr.
    pub pm_delta: f64,
    /// km/s; carried, never fitted.
    pub radial_velocity: f64,
    /// Reference epoch, TAI days.
    pub epoch: f64,
}

impl SourceParams {
    pub fn new(alpha: f64, delta: f64, epoch: f64) -> Self {
        Self {
            alpha: wrap_two_pi(alpha),
            delta,
            parallax: 0.0,
            pm_alpha_star: 0.0,
            pm_delta: 0.0,
            radial_velocity: 0.0,
            epoch,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.alpha,
            self.delta,
            self.parallax,
            self.pm_alpha_star,
            self.pm_delta,
            self.radial_velocity,
            self.epoch,
        ]
        .iter()
        .all(|x| x.is_finite())
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFiniteInput("source parameters"))
        }
    }

    /// Apply a rad-equivalent update `(Δα*, Δδ, Δϖ, Δμα*, Δμδ)`.
    pub fn apply_update(&self, d: &[f64; 5]) -> SourceParams {
        let cos_d = self.delta.cos();
        SourceParams {
            alpha: wrap_two_pi(self.alpha + d[0] / cos_d),
            delta: self.delta + d[1],
            parallax: self.parallax + d[2] / MAS,
            pm_alpha_star: self.pm_alpha_star + d[3] / MAS,
            pm_delta: self.pm_delta + d[4] / MAS,
            ..*self
        }
    }

    /// Difference `self − other` in rad-equivalents, with α folded through
    /// cos δ of `other`.
    pub fn difference(&self, other: &SourceParams) -> [f64; 5] {
        [
            wrap_pi(self.alpha - other.alpha) * other.delta.cos(),
            self.delta - other.delta,
            (self.parallax - other.parallax) * MAS,
            (self.pm_alpha_star - other.pm_alpha_star) * MAS,
            (self.pm_delta - other.pm_delta) * MAS,
        ]
    }
}

/// Normal triad at a source position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTriad {
    pub p: Vector3<f64>,
    pub q: Vector3<f64>,
    pub r: Vector3<f64>,
}

pub fn local_triad(alpha: f64, delta: f64) -> LocalTriad {
    let (sa, ca) = alpha.sin_cos();
    let (sd, cd) = delta.sin_cos();
    LocalTriad {
        p: Vector3::new(-sa, ca, 0.0),
        q: Vector3::new(-sd * ca, -sd * sa, cd),
        r: Vector3::new(cd * ca, cd * sa, sd),
    }
}

/// Barycentric state of the satellite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverState {
    pub t: f64,
    /// AU.
    pub position: Vector3<f64>,
    /// km/s.
    pub velocity: Vector3<f64>,
}

/// Analytic circular orbit in the reference x-y plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ephemeris {
    pub radius_au: f64,
    /// Orbital longitude at `t_ref`, rad.
    pub phase_at_ref: f64,
    pub t_ref: f64,
}

impl Default for Ephemeris {
    fn default() -> Self {
        Self {
            radius_au: 1.01,
            phase_at_ref: 0.0,
            t_ref: 0.0,
        }
    }
}

impl Ephemeris {
    pub fn longitude(&self, t: f64) -> f64 {
        self.phase_at_ref + 2.0 * std::f64::consts::PI * (t - self.t_ref) / DAYS_PER_YEAR
    }

    pub fn observer(&self, t: f64) -> ObserverState {
        let (sl, cl) = self.longitude(t).sin_cos();
        let speed =
            self.radius_au * AU_KM * 2.0 * std::f64::consts::PI / (DAYS_PER_YEAR * SECONDS_PER_DAY);
        ObserverState {
            t,
            position: Vector3::new(cl, sl, 0.0) * self.radius_au,
            velocity: Vector3::new(-sl, cl, 0.0) * speed,
        }
    }

    /// Unit vector from the satellite towards the Sun.
    pub fn sun_direction(&self, t: f64) -> Vector3<f64> {
        let (sl, cl) = self.longitude(t).sin_cos();
        Vector3::new(-cl, -sl, 0.0)
    }
}

/// Field of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fov {
    Preceding,
    Following,
}

impl Fov {
    pub fn index(self) -> usize {
        match self {
            Fov::Preceding => 0,
            Fov::Following => 1,
        }
    }

    pub fn from_index(i: u32) -> Option<Fov> {
        match i {
            0 => Some(Fov::Preceding),
            1 => Some(Fov::Following),
            _ => None,
        }
    }

    /// Instrument longitude of the field centre.
    pub fn centre(self, basic_angle: f64) -> f64 {
        match self {
            Fov::Preceding => 0.5 * basic_angle,
            Fov::Following => -0.5 * basic_angle,
        }
    }
}

/// One along-scan abscissa measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub source_id: SourceId,
    pub t: f64,
    pub fov: Fov,
    pub calib_unit: u16,
    /// rad
    pub abscissa_obs: f64,
    /// rad, > 0
    pub sigma: f64,
}

impl Observation {
    pub fn check_finite(&self) -> Result<(), ModelError> {
        if !self.t.is_finite() {
            return Err(ModelError::NonFiniteInput("observation time"));
        }
        if !self.abscissa_obs.is_finite() {
            return Err(ModelError::NonFiniteInput("observed abscissa"));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(ModelError::NonFiniteInput("observation sigma"));
        }
        Ok(())
    }
}

fn check_vec(v: &Vector3<f64>, what: &'static str) -> Result<(), ModelError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFiniteInput(what))
    }
}

/// Unnormalised astrometric direction in rad-equivalents. Shared by the
/// propagation and its partials.
fn astrometric_vector(
    s: &SourceParams,
    tri: &LocalTriad,
    t: f64,
    b: &Vector3<f64>,
) -> Vector3<f64> {
    let tau = (t - s.epoch) / DAYS_PER_YEAR;
    let b_perp = b - tri.r * b.dot(&tri.r);
    tri.r + (tri.p * s.pm_alpha_star + tri.q * s.pm_delta) * (tau * MAS)
        - b_perp * (s.parallax * MAS)
}

/// Direction to the source at `t` as seen by `obs`, before aberration.
pub fn propagate_direction(
    s: &SourceParams,
    t: f64,
    obs: &ObserverState,
) -> Result<Vector3<f64>, ModelError> {
    s.check_finite()?;
    if !t.is_finite() {
        return Err(ModelError::NonFiniteInput("time"));
    }
    check_vec(&obs.position, "observer position")?;
    let tri = local_triad(s.alpha, s.delta);
    Ok(astrometric_vector(s, &tri, t, &obs.position).normalize())
}

/// First-order aberration, scaled by `1 + g`.
pub fn apply_aberration(
    u: &Vector3<f64>,
    v: &Vector3<f64>,
    g: f64,
) -> Result<Vector3<f64>, ModelError> {
    check_vec(u, "direction")?;
    check_vec(v, "velocity")?;
    if !g.is_finite() {
        return Err(ModelError::NonFiniteInput("global parameter"));
    }
    let w = v * ((1.0 + g) / C_KMS);
    Ok((u + w - u * u.dot(&w)).normalize())
}

/// Time/field/unit tags of an observation, the part the model needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsMeta {
    pub t: f64,
    pub fov: Fov,
    pub calib_unit: u16,
}

impl From<&Observation> for ObsMeta {
    fn from(o: &Observation) -> Self {
        ObsMeta {
            t: o.t,
            fov: o.fov,
            calib_unit: o.calib_unit,
        }
    }
}

/// Partial derivatives of one abscissa.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationPartials {
    /// Predicted abscissa at the linearisation point, rad.
    pub predicted: f64,
    /// ∂η/∂(α*, δ, ϖ, μα*, μδ) in rad-equivalents.
    pub source: [f64; 5],
    /// (knot index, ∂η/∂coeff) for the two knots bracketing `t`.
    pub attitude: [(usize, f64); 2],
    /// (calibration unit, ∂η/∂offset).
    pub calib: (u16, f64),
    pub global: f64,
}

struct Chain {
    predicted: f64,
    /// Gradient of η with respect to the unnormalised astrometric vector.
    grad_u0: Vector3<f64>,
    global: f64,
    tri: LocalTriad,
    tau: f64,
    b: Vector3<f64>,
    knots: [(usize, f64); 2],
}

fn evaluate(
    s: &SourceParams,
    att: &AttitudeModel,
    cal: &CalibrationTable,
    glob: &GlobalParams,
    meta: &ObsMeta,
    law: &ScanLaw,
    with_partials: bool,
) -> Result<Chain, ModelError> {
    s.check_finite()?;
    if !meta.t.is_finite() {
        return Err(ModelError::NonFiniteInput("observation time"));
    }
    if !glob.g.is_finite() {
        return Err(ModelError::NonFiniteInput("global parameter"));
    }
    let (phase_corr, knots) = att.evaluate(meta.t)?;
    let offset = cal.offset(meta.calib_unit);
    if !offset.is_finite() {
        return Err(ModelError::NonFiniteInput("calibration offset"));
    }

    let obs = law.orbit.observer(meta.t);
    let tri = local_triad(s.alpha, s.delta);
    let u0 = astrometric_vector(s, &tri, meta.t, &obs.position);
    let n0 = u0.norm();
    let u1 = u0 / n0;

    let w = obs.velocity * ((1.0 + glob.g) / C_KMS);
    let a = u1 + w - u1 * u1.dot(&w);
    let na = a.norm();
    let u2 = a / na;

    let frame = law.nominal_attitude(meta.t)?;
    let x = frame * u2;
    let phi = x[1].atan2(x[0]);
    let predicted = wrap_pi(phi - meta.fov.centre(law.basic_angle) - phase_corr) + offset;
    if !predicted.is_finite() {
        return Err(ModelError::NonFiniteInput("predicted abscissa"));
    }

    let knots = [(knots[0].0, -knots[0].1), (knots[1].0, -knots[1].1)];
    let tau = (meta.t - s.epoch) / DAYS_PER_YEAR;
    if !with_partials {
        return Ok(Chain {
            predicted,
            grad_u0: Vector3::zeros(),
            global: 0.0,
            tri,
            tau,
            b: obs.position,
            knots,
        });
    }

    // ∂φ/∂x in the instrument frame, pulled back to celestial coordinates
    let rho2 = x[0] * x[0] + x[1] * x[1];
    let h: Vector3<f64> = frame.transpose() * Vector3::new(-x[1] / rho2, x[0] / rho2, 0.0);
    // through the normalisation of a
    let h2 = (h - u2 * u2.dot(&h)) / na;
    let dglobal = h2.dot(&(obs.velocity / C_KMS - u1 * u1.dot(&(obs.velocity / C_KMS))));
    // through a(u1) = u1 (1 − u1·w) + w
    let h3 = h2 * (1.0 - u1.dot(&w)) - w * u1.dot(&h2);
    // through the normalisation of u0
    let grad_u0 = (h3 - u1 * u1.dot(&h3)) / n0;

    Ok(Chain {
        predicted,
        grad_u0,
        global: dglobal,
        tri,
        tau,
        b: obs.position,
        knots,
    })
}

/// Predicted along-scan abscissa.
pub fn predict_abscissa(
    s: &SourceParams,
    att: &AttitudeModel,
    cal: &CalibrationTable,
    glob: &GlobalParams,
    meta: &ObsMeta,
    law: &ScanLaw,
) -> Result<f64, ModelError> {
    evaluate(s, att, cal, glob, meta, law, false).map(|c| c.predicted)
}

/// Predicted abscissa together with its analytic partial derivatives.
pub fn observation_partials(
    s: &SourceParams,
    att: &AttitudeModel,
    cal: &CalibrationTable,
    glob: &GlobalParams,
    meta: &ObsMeta,
    law: &ScanLaw,
) -> Result<ObservationPartials, ModelError> {
    let c = evaluate(s, att, cal, glob, meta, law, true)?;
    let LocalTriad { p, q, r } = c.tri;
    let (sd, cd) = s.delta.sin_cos();
    let tan_d = sd / cd;
    let plx = s.parallax * MAS;
    let mua = s.pm_alpha_star * MAS;
    let mud = s.pm_delta * MAS;
    let b = c.b;
    let br = b.dot(&r);

    // ∂u0/∂α* at fixed δ: ∂r/∂α* = p, ∂p/∂α* = −r + tan δ q, ∂q/∂α* = −tan δ p
    let du_alpha =
        p + ((q * tan_d - r) * mua - p * (tan_d * mud)) * c.tau + (r * b.dot(&p) + p * br) * plx;
    // ∂r/∂δ = q, ∂p/∂δ = 0, ∂q/∂δ = −r
    let du_delta = q - r * (c.tau * mud) + (r * b.dot(&q) + q * br) * plx;
    let du_plx = -(b - r * br);
    let du_mua = p * c.tau;
    let du_mud = q * c.tau;

    let g = &c.grad_u0;
    let source = [
        g.dot(&du_alpha),
        g.dot(&du_delta),
        g.dot(&du_plx),
        g.dot(&du_mua),
        g.dot(&du_mud),
    ];
    if source.iter().any(|x| !x.is_finite()) || !c.global.is_finite() {
        return Err(ModelError::NonFiniteInput("partial derivatives"));
    }
    Ok(ObservationPartials {
        predicted: c.predicted,
        source,
        attitude: c.knots,
        calib: (meta.calib_unit, 1.0),
        global: c.global,
    })
}

/// Rotation about an axis by a small or large angle (Rodrigues), as an active
/// rotation matrix.
pub fn rotation_matrix(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    nalgebra::Rotation3::new(*axis_angle).into_inner()
}

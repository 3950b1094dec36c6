//! Unit conventions.
//!
//! Angles are radians internally. Parallaxes and proper motions cross the
//! API and file boundaries in mas and mas/yr; inside the solver every
//! astrometric unknown is a "rad-equivalent" (rad, rad/yr).

use std::f64::consts::PI;

/// Radians per milliarcsecond.
pub const MAS: f64 = PI / (180.0 * 3600.0 * 1000.0);

/// Days per Julian year.
pub const DAYS_PER_YEAR: f64 = 365.25;

/// Astronomical unit in km.
pub const AU_KM: f64 = 149_597_870.7;

/// Speed of light in km/s.
pub const C_KMS: f64 = 299_792.458;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[inline]
pub fn mas_to_rad(mas: f64) -> f64 {
    mas * MAS
}

#[inline]
pub fn rad_to_mas(rad: f64) -> f64 {
    rad / MAS
}

/// Wrap an angle into `[0, 2π)`.
pub fn wrap_two_pi(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if y >= 2.0 * PI {
        0.0
    } else {
        y
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_pi(x: f64) -> f64 {
    let y = wrap_two_pi(x);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

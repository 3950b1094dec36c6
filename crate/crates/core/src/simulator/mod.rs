//! Synthetic truth catalog, transit search and noisy along-scan observations.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, domain, source id, index)`, so the output does not depend on the
//! order in which sources are processed.

mod scan_law;
mod transits;

pub use scan_law::{ScanLaw, DEFAULT_ACROSS_SCAN_HALF_WIDTH, DEFAULT_MISSION_DAYS};
pub use transits::{along_scan_angle, generate_transits, Transit};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{predict_abscissa, ModelError, ObsMeta, Observation, SourceId, SourceParams};
use crate::solver::{AttitudeModel, CalibrationTable, GlobalParams};
use crate::units::MAS;

const DOMAIN_CATALOG: u64 = 1;
const DOMAIN_NOISE: u64 = 2;
const DOMAIN_PERTURB: u64 = 3;
const DOMAIN_CALIB: u64 = 4;

/// Counter-based generator: the key is the whole ChaCha seed.
pub fn keyed_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCatalog {
    /// Indexed by source id.
    pub sources: Vec<SourceParams>,
    pub rng_seed: u64,
}

impl TruthCatalog {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Isotropic positions, exponential parallaxes (mean 2 mas, floor
    /// 0.1 mas), Gaussian proper motions (10 mas/yr) and radial velocities
    /// (30 km/s), all referred to `epoch`.
    pub fn generate(n: usize, epoch: f64, seed: u64) -> Self {
        let plx = Exp::new(0.5).expect("rate > 0");
        let sources = (0..n as u64)
            .map(|id| {
                let mut rng = keyed_rng(seed, DOMAIN_CATALOG, id, 0);
                let z: f64 = rng.random_range(-1.0..1.0);
                let alpha: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                let mut s = SourceParams::new(alpha, z.asin(), epoch);
                s.parallax = 0.1 + Distribution::<f64>::sample(&plx, &mut rng).min(100.0);
                s.pm_alpha_star = 10.0 * rng.sample::<f64, _>(StandardNormal);
                s.pm_delta = 10.0 * rng.sample::<f64, _>(StandardNormal);
                s.radial_velocity = 30.0 * rng.sample::<f64, _>(StandardNormal);
                s
            })
            .collect();
        TruthCatalog {
            sources,
            rng_seed: seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// rad
    pub sigma_al: f64,
    pub seed: u64,
}

/// Weight assigned to observations of a noiseless simulation.
pub const ZERO_NOISE_WEIGHT_SIGMA: f64 = MAS;

impl NoiseModel {
    /// The σ written into each observation; noiseless runs still need a
    /// positive weight.
    pub fn recorded_sigma(&self) -> f64 {
        if self.sigma_al > 0.0 {
            self.sigma_al
        } else {
            ZERO_NOISE_WEIGHT_SIGMA
        }
    }
}

/// Observations of every source, sorted by (source id, time).
pub fn synthesize_observations(
    truth: &TruthCatalog,
    law: &ScanLaw,
    cal_truth: &CalibrationTable,
    glob_truth: &GlobalParams,
    noise: &NoiseModel,
) -> Result<Vec<Observation>, ModelError> {
    if !(noise.sigma_al.is_finite() && noise.sigma_al >= 0.0) {
        return Err(ModelError::NonFiniteInput("noise sigma"));
    }
    let att = AttitudeModel::zeros(
        law.mission_start,
        law.mission_end,
        law.mission_end - law.mission_start,
    );
    let window = (law.mission_start, law.mission_end);
    let per_source: Result<Vec<Vec<Observation>>, ModelError> = truth
        .sources
        .par_iter()
        .enumerate()
        .map(|(id, s)| {
            let id = id as SourceId;
            generate_transits(law, s, window)
                .into_iter()
                .enumerate()
                .map(|(k, tr)| {
                    let meta = ObsMeta {
                        t: tr.t,
                        fov: tr.fov,
                        calib_unit: tr.calib_unit,
                    };
                    let eta = predict_abscissa(s, &att, cal_truth, glob_truth, &meta, law)?;
                    let z: f64 =
                        keyed_rng(noise.seed, DOMAIN_NOISE, id, k as u64).sample(StandardNormal);
                    Ok(Observation {
                        source_id: id,
                        t: tr.t,
                        fov: tr.fov,
                        calib_unit: tr.calib_unit,
                        abscissa_obs: eta + noise.sigma_al * z,
                        sigma: noise.recorded_sigma(),
                    })
                })
                .collect()
        })
        .collect();
    Ok(per_source?.into_iter().flatten().collect())
}

/// Gaussian perturbation scales for the starting catalog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbMagnitudes {
    /// Per coordinate (α*, δ), mas.
    pub position_mas: f64,
    pub parallax_mas: f64,
    /// Per component, mas/yr.
    pub pm_masyr: f64,
}

impl Default for PerturbMagnitudes {
    fn default() -> Self {
        Self {
            position_mas: 100.0,
            parallax_mas: 10.0,
            pm_masyr: 10.0,
        }
    }
}

pub fn perturb_catalog(
    truth: &TruthCatalog,
    magnitudes: &PerturbMagnitudes,
    seed: u64,
) -> Vec<SourceParams> {
    truth
        .sources
        .iter()
        .enumerate()
        .map(|(id, s)| {
            let mut rng = keyed_rng(seed, DOMAIN_PERTURB, id as u64, 0);
            let mut draw = |scale: f64| -> f64 {
                let z: f64 = rng.sample(StandardNormal);
                scale * MAS * z
            };
            let d = [
                draw(magnitudes.position_mas),
                draw(magnitudes.position_mas),
                draw(magnitudes.parallax_mas),
                draw(magnitudes.pm_masyr),
                draw(magnitudes.pm_masyr),
            ];
            if d.iter().all(|&x| x == 0.0) {
                *s
            } else {
                s.apply_update(&d)
            }
        })
        .collect()
}

/// Zero-mean random calibration offsets with the given scale (rad).
pub fn random_calibration(n_units: usize, scale: f64, seed: u64) -> CalibrationTable {
    let mut offsets: Vec<f64> = (0..n_units as u64)
        .map(|u| {
            let z: f64 = keyed_rng(seed, DOMAIN_CALIB, u, 0).sample(StandardNormal);
            scale * z
        })
        .collect();
    let mean = offsets.iter().sum::<f64>() / n_units.max(1) as f64;
    offsets.iter_mut().for_each(|x| *x -= mean);
    CalibrationTable::new(offsets)
}

#![allow(dead_code)]

pub mod dense;

use agis_core::datatrain::MemoryObservations;
use agis_core::model::{Observation, SourceId, SourceParams};
use agis_core::simulator::{
    perturb_catalog, random_calibration, synthesize_observations, NoiseModel, PerturbMagnitudes,
    ScanLaw, TruthCatalog,
};
use agis_core::solver::{
    AttitudeModel, CalibrationTable, GlobalParams, InProcessExecutor, SolverConfig, SolverState,
};
use agis_core::units::MAS;

pub const EPOCH: f64 = 913.125;
pub const G_TRUTH: f64 = 1e-4;

/// A small simulated problem: full five-year scan law, coarse attitude knots.
pub struct Desk {
    pub law: ScanLaw,
    pub truth: TruthCatalog,
    pub cal_truth: CalibrationTable,
    pub glob_truth: GlobalParams,
    pub obs: Vec<Observation>,
    pub config: SolverConfig,
}

impl Desk {
    pub fn new(n: usize, sigma_mas: f64, knot_spacing: f64, seed: u64) -> Self {
        Self::with_law(ScanLaw::default(), n, sigma_mas, knot_spacing, seed)
    }

    pub fn with_law(law: ScanLaw, n: usize, sigma_mas: f64, knot_spacing: f64, seed: u64) -> Self {
        let truth = TruthCatalog::generate(n, EPOCH, seed);
        let cal_truth = random_calibration(law.n_calib_units(), 2.0 * MAS, seed + 1);
        let glob_truth = GlobalParams { g: G_TRUTH };
        let noise = NoiseModel {
            sigma_al: sigma_mas * MAS,
            seed: seed + 2,
        };
        let obs = synthesize_observations(&truth, &law, &cal_truth, &glob_truth, &noise).unwrap();
        let config = SolverConfig {
            attitude_knot_spacing: knot_spacing,
            primary_fraction: 1.0,
            ..Default::default()
        };
        Desk {
            law,
            truth,
            cal_truth,
            glob_truth,
            obs,
            config,
        }
    }

    pub fn zero_attitude(&self) -> AttitudeModel {
        AttitudeModel::zeros(
            self.law.mission_start,
            self.law.mission_end,
            self.config.attitude_knot_spacing,
        )
    }

    /// Every block at its true value.
    pub fn truth_state(&self) -> SolverState {
        SolverState {
            iteration: 0,
            sources: self.truth.sources.clone(),
            n_primary: self.config.n_primary(self.truth.len()),
            attitude: self.zero_attitude(),
            calibration: self.cal_truth.clone(),
            global: self.glob_truth,
        }
    }

    /// Perturbed sources, zero attitude, calibration and global corrections.
    pub fn start_state(&self, seed: u64) -> SolverState {
        SolverState {
            iteration: 0,
            sources: perturb_catalog(&self.truth, &PerturbMagnitudes::default(), seed),
            n_primary: self.config.n_primary(self.truth.len()),
            attitude: self.zero_attitude(),
            calibration: CalibrationTable::zeros(self.law.n_calib_units()),
            global: GlobalParams::default(),
        }
    }

    pub fn source_obs(&self, id: SourceId) -> Vec<Observation> {
        self.obs
            .iter()
            .filter(|o| o.source_id == id)
            .copied()
            .collect()
    }

    pub fn executor(&self, batch: usize) -> InProcessExecutor<MemoryObservations> {
        InProcessExecutor::new(MemoryObservations::new(&self.obs), batch)
    }

    pub fn anchors(&self) -> Vec<(SourceId, SourceParams)> {
        self.truth
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| (i as SourceId, *s))
            .collect()
    }

    /// Largest |difference| from the truth over all sources, rad-equivalents.
    pub fn max_source_error(&self, sources: &[SourceParams]) -> f64 {
        sources
            .iter()
            .zip(&self.truth.sources)
            .flat_map(|(a, b)| a.difference(b))
            .fold(0.0, |m: f64, d| m.max(d.abs()))
    }
}

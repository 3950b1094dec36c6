//! Fixtures shared by the benchmarks.

use agis_core::model::{Observation, SourceParams};
use agis_core::simulator::{
    perturb_catalog, random_calibration, synthesize_observations, NoiseModel, PerturbMagnitudes,
    ScanLaw, TruthCatalog,
};
use agis_core::solver::{
    accumulate_block_partials, AttitudeModel, BlockPartials, CalibrationTable, GlobalParams,
    SolverConfig,
};
use agis_core::units::MAS;

/// A simulated catalog at the default knot spacing, solved from a perturbed
/// start.
pub struct Fixture {
    pub law: ScanLaw,
    pub start: Vec<SourceParams>,
    /// Observations grouped by source, in source order.
    pub obs: Vec<Vec<Observation>>,
    pub attitude: AttitudeModel,
    pub calibration: CalibrationTable,
    pub global: GlobalParams,
}

impl Fixture {
    pub fn new(n_sources: usize, seed: u64) -> Self {
        let law = ScanLaw::default();
        let truth = TruthCatalog::generate(n_sources, 913.125, seed);
        let calibration = random_calibration(law.n_calib_units(), 2.0 * MAS, seed + 1);
        let global = GlobalParams { g: 1e-4 };
        let noise = NoiseModel {
            sigma_al: MAS,
            seed: seed + 2,
        };
        let flat = synthesize_observations(&truth, &law, &calibration, &global, &noise)
            .expect("simulated observations");
        let mut obs = vec![Vec::new(); n_sources];
        for o in flat {
            obs[o.source_id as usize].push(o);
        }
        let spacing = SolverConfig::default().attitude_knot_spacing;
        Fixture {
            start: perturb_catalog(&truth, &PerturbMagnitudes::default(), seed + 3),
            attitude: AttitudeModel::zeros(law.mission_start, law.mission_end, spacing),
            law,
            obs,
            calibration,
            global,
        }
    }

    pub fn n_obs(&self) -> usize {
        self.obs.iter().map(Vec::len).sum()
    }

    pub fn batch(&self) -> Vec<(SourceParams, &[Observation])> {
        self.start
            .iter()
            .zip(&self.obs)
            .map(|(s, o)| (*s, o.as_slice()))
            .collect()
    }

    /// Accumulated normal equations of the sources in `range`.
    pub fn partials(&self, range: std::ops::Range<usize>) -> BlockPartials {
        accumulate_block_partials(
            &self.batch()[range],
            &self.attitude,
            &self.calibration,
            &self.global,
            &self.law,
        )
        .expect("finite partials")
    }
}

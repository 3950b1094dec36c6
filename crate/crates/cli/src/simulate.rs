//! `agis simulate`: truth catalog, starting catalog, observation store, an
//! empty whiteboard and the manifest.

use std::collections::BTreeMap;

use agis_core::datatrain::{prepare_store, WorkerInputs};
use agis_core::io::{write_catalog, write_observation_store, write_snapshot, Snapshot};
use agis_core::model::{SourceId, SourceParams};
use agis_core::simulator::{
    keyed_rng, perturb_catalog, random_calibration, synthesize_observations, NoiseModel,
    TruthCatalog,
};
use agis_core::solver::{AttitudeModel, CalibrationTable, GlobalParams, SolverState};
use agis_core::units::MAS;
use agis_core::whiteboard::{FileJobStore, SystemClock};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::manifest::{digest_file, FormatVersions, Manifest};
use crate::{CliError, RunConfig, RunDir};

/// Files covered by the manifest digests.
const DIGESTED: [&str; 6] = [
    "truth.csv",
    "truth.state",
    "start.csv",
    "start.state",
    "observations/observations.bin",
    "observations/observations.idx",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub command: &'static str,
    pub n_sources: usize,
    pub n_observations: u64,
    pub mean_obs_per_source: f64,
}

fn rows(sources: &[SourceParams]) -> Vec<(SourceId, SourceParams)> {
    sources
        .iter()
        .enumerate()
        .map(|(i, s)| (i as SourceId, *s))
        .collect()
}

pub fn cmd_simulate(config: &RunConfig, run: &RunDir) -> Result<Manifest, CliError> {
    config.validate()?;
    if run.root.exists() && std::fs::read_dir(&run.root)?.next().is_some() {
        return Err(CliError::Validation(format!(
            "run directory {} is not empty",
            run.root.display()
        )));
    }
    std::fs::create_dir_all(&run.root)?;
    let law = &config.scan_law;
    let seeds = config.seeds();

    let truth = TruthCatalog::generate(config.n_sources, config.epoch, seeds.catalog);
    let cal_truth = random_calibration(
        law.n_calib_units(),
        config.calibration_scale_mas * MAS,
        seeds.calibration,
    );
    let glob_truth = GlobalParams { g: config.g_truth };
    let noise = NoiseModel {
        sigma_al: config.noise_sigma_mas * MAS,
        seed: seeds.noise,
    };
    let mut obs = synthesize_observations(&truth, law, &cal_truth, &glob_truth, &noise)
        .map_err(|e| CliError::Validation(format!("simulation failed: {e}")))?;
    if let Some(k) = config.faults.nan_observation {
        let o = obs.get_mut(k as usize).ok_or_else(|| {
            CliError::Validation(format!(
                "nan_observation {k} is outside the observation set"
            ))
        })?;
        o.abscissa_obs = f64::NAN;
    }
    write_observation_store(&run.observations(), &obs, config.n_sources as u64)?;

    let zero_attitude = AttitudeModel::zeros(
        law.mission_start,
        law.mission_end,
        config.solver.attitude_knot_spacing,
    );
    let mut start_attitude = zero_attitude.clone();
    for (k, c) in start_attitude.coeffs.iter_mut().enumerate() {
        let z: f64 = keyed_rng(seeds.attitude, 0, k as u64, 0).sample(StandardNormal);
        *c = config.attitude_perturb_rad * z;
    }
    let n_primary = config.n_primary();
    let truth_state = SolverState {
        iteration: 0,
        sources: truth.sources.clone(),
        n_primary,
        attitude: zero_attitude,
        calibration: cal_truth,
        global: glob_truth,
    };
    let start_state = SolverState {
        iteration: 0,
        sources: perturb_catalog(&truth, &config.perturb, seeds.perturb),
        n_primary,
        attitude: start_attitude,
        calibration: CalibrationTable::zeros(law.n_calib_units()),
        global: GlobalParams::default(),
    };
    write_catalog(&run.truth_catalog(), &rows(&truth_state.sources))?;
    write_catalog(&run.start_catalog(), &rows(&start_state.sources))?;
    let n_knots = truth_state.attitude.n_knots();
    for (path, state) in [
        (run.truth_state(), truth_state),
        (run.start_state(), start_state),
    ] {
        write_snapshot(&path, &Snapshot { state, law: *law })?;
    }

    let observations = std::fs::canonicalize(run.observations())?;
    prepare_store(&run.whiteboard(), &WorkerInputs { observations })?;
    FileJobStore::create(
        &run.whiteboard(),
        config.max_attempts,
        Box::new(SystemClock),
    )?;

    let mut counts = vec![0u64; config.n_sources];
    for o in &obs {
        counts[o.source_id as usize] += 1;
    }
    let mut artifacts = BTreeMap::new();
    for rel in DIGESTED {
        artifacts.insert(rel.to_string(), digest_file(&run.root.join(rel))?);
    }
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        formats: FormatVersions::current(),
        config: config.clone(),
        seeds,
        n_primary,
        n_attitude_knots: n_knots,
        n_calib_units: law.n_calib_units(),
        n_observations: obs.len() as u64,
        mean_obs_per_source: obs.len() as f64 / config.n_sources as f64,
        min_obs_per_source: counts.iter().copied().min().unwrap_or(0),
        max_obs_per_source: counts.iter().copied().max().unwrap_or(0),
        artifacts,
    };
    manifest.write(run)?;
    Ok(manifest)
}

impl SimulateSummary {
    pub fn of(m: &Manifest) -> Self {
        SimulateSummary {
            command: "simulate",
            n_sources: m.config.n_sources,
            n_observations: m.n_observations,
            mean_obs_per_source: m.mean_obs_per_source,
        }
    }
}

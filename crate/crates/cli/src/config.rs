//! Run configuration: everything a simulation and its solution depend on.

use std::path::Path;

use agis_core::simulator::{PerturbMagnitudes, ScanLaw};
use agis_core::solver::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_sources: usize,
    /// Reference epoch of the catalog, days.
    pub epoch: f64,
    pub scan_law: ScanLaw,
    pub noise_sigma_mas: f64,
    pub perturb: PerturbMagnitudes,
    /// Gaussian scale of the starting attitude error per knot, rad.
    pub attitude_perturb_rad: f64,
    /// Scale of the true calibration offsets, mas.
    pub calibration_scale_mas: f64,
    pub g_truth: f64,
    pub solver: SolverConfig,
    /// Sources per job.
    pub batch_size: usize,
    pub workers: usize,
    pub lease_ms: u64,
    pub heartbeat_ms: u64,
    /// Bytes of observation records a worker keeps resident.
    pub max_batch_memory: u64,
    pub max_attempts: u32,
    /// Frame anchors: the first `n` primary sources at their true
    /// parameters, all primary sources when unset.
    pub n_anchors: Option<usize>,
    pub seed: u64,
    pub faults: FaultInjection,
}

/// Deliberate failures for exercising the error paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultInjection {
    /// Replace the abscissa of this observation (index in the sorted store)
    /// with NaN.
    pub nan_observation: Option<u64>,
    pub crash: Option<CrashInjection>,
}

/// The first worker spawned for `iteration` stops dead after claiming
/// `after_claims` jobs, leaving its last job to lease expiry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashInjection {
    pub iteration: u32,
    pub after_claims: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_sources: 1000,
            epoch: 913.125,
            scan_law: ScanLaw::default(),
            noise_sigma_mas: 0.0,
            perturb: PerturbMagnitudes::default(),
            attitude_perturb_rad: 1e-5,
            calibration_scale_mas: 2.0,
            g_truth: 1e-4,
            solver: SolverConfig::default(),
            batch_size: 500,
            workers: 1,
            lease_ms: 60_000,
            heartbeat_ms: 10_000,
            max_batch_memory: 256 << 20,
            max_attempts: 3,
            n_anchors: None,
            seed: 1,
            faults: FaultInjection::default(),
        }
    }
}

/// Sub-seeds of the independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub catalog: u64,
    pub calibration: u64,
    pub noise: u64,
    pub perturb: u64,
    pub attitude: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            catalog: self.seed,
            calibration: self.seed.wrapping_add(1),
            noise: self.seed.wrapping_add(2),
            perturb: self.seed.wrapping_add(3),
            attitude: self.seed.wrapping_add(4),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Validation(m));
        if self.n_sources == 0 {
            return fail("catalog size must be at least 1".into());
        }
        if !self.epoch.is_finite() {
            return fail("epoch must be finite".into());
        }
        self.scan_law.validate().map_err(CliError::Validation)?;
        let nonneg = [
            ("noise_sigma_mas", self.noise_sigma_mas),
            ("perturb.position_mas", self.perturb.position_mas),
            ("perturb.parallax_mas", self.perturb.parallax_mas),
            ("perturb.pm_masyr", self.perturb.pm_masyr),
            ("attitude_perturb_rad", self.attitude_perturb_rad),
            ("calibration_scale_mas", self.calibration_scale_mas),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        if !self.g_truth.is_finite() {
            return fail("g_truth must be finite".into());
        }
        self.solver
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if self.batch_size == 0 || self.workers == 0 {
            return fail("batch_size and workers must be at least 1".into());
        }
        if !(self.lease_ms > self.heartbeat_ms && self.heartbeat_ms > 0) {
            return fail("require lease_ms > heartbeat_ms > 0".into());
        }
        if self.max_batch_memory == 0 || self.max_attempts == 0 {
            return fail("max_batch_memory and max_attempts must be positive".into());
        }
        if self.n_anchors == Some(0) {
            return fail("n_anchors must be at least 1 when set".into());
        }
        Ok(())
    }

    pub fn n_primary(&self) -> usize {
        self.solver.n_primary(self.n_sources)
    }

    /// Fields that change the numbers a run produces. Worker count, leases
    /// and fault injection are excluded: the result does not depend on them.
    pub fn result_digest(&self) -> [u8; 32] {
        let c = RunConfig {
            workers: 1,
            lease_ms: 0,
            heartbeat_ms: 0,
            max_batch_memory: 0,
            max_attempts: 0,
            faults: FaultInjection::default(),
            ..self.clone()
        };
        agis_core::io::codec::sha256(serde_json::to_string(&c).expect("config").as_bytes())
    }
}

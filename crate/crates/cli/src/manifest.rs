//! The run manifest: effective configuration, derived seeds, format versions
//! and digests of the simulated artifacts. It holds no timestamps, so the
//! same configuration always produces the same manifest.

use std::collections::BTreeMap;
use std::path::Path;

use agis_core::io::codec::{hex, sha256};
use agis_core::io::{write_atomic, OBS_HEADER_BYTES, OBS_RECORD_BYTES, SNAPSHOT_VERSION};
use agis_core::whiteboard::ENVELOPE_VERSION;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CHECKPOINT_VERSION;
use crate::{CliError, RunConfig, RunDir, Seeds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub snapshot: u32,
    pub envelope: u32,
    pub checkpoint: u32,
    pub observation_header_bytes: usize,
    pub observation_record_bytes: usize,
}

impl FormatVersions {
    pub fn current() -> Self {
        FormatVersions {
            snapshot: SNAPSHOT_VERSION,
            envelope: ENVELOPE_VERSION,
            checkpoint: CHECKPOINT_VERSION,
            observation_header_bytes: OBS_HEADER_BYTES,
            observation_record_bytes: OBS_RECORD_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub formats: FormatVersions,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub n_primary: usize,
    pub n_attitude_knots: usize,
    pub n_calib_units: usize,
    pub n_observations: u64,
    pub mean_obs_per_source: f64,
    pub min_obs_per_source: u64,
    pub max_obs_per_source: u64,
    /// Hex SHA-256 of each simulated file, keyed by path relative to the run
    /// directory.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(run: &RunDir) -> Result<Self, CliError> {
        let path = run.require(run.manifest())?;
        let text = std::fs::read_to_string(&path)?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Storage(format!("{}: {e}", path.display())))?;
        if m.formats != FormatVersions::current() {
            return Err(CliError::Storage(format!(
                "run directory formats {:?} differ from this build's {:?}",
                m.formats,
                FormatVersions::current()
            )));
        }
        m.config.validate()?;
        Ok(m)
    }

    pub fn write(&self, run: &RunDir) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest") + "\n";
        write_atomic(&run.manifest(), text.as_bytes())?;
        Ok(())
    }

    /// Recompute the artifact digests and compare.
    pub fn verify_artifacts(&self, run: &RunDir) -> Result<(), CliError> {
        for (rel, expected) in &self.artifacts {
            let actual = digest_file(&run.root.join(rel))?;
            if &actual != expected {
                return Err(CliError::Storage(format!(
                    "{rel} does not match its manifest digest"
                )));
            }
        }
        Ok(())
    }
}

pub fn digest_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingArtifact(path.to_path_buf())
        } else {
            CliError::Storage(format!("{}: {e}", path.display()))
        }
    })?;
    Ok(hex(&sha256(&bytes)))
}

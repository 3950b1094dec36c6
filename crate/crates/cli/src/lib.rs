//! Command implementations behind the `agis` binary: simulate a run
//! directory, drive the solution through worker processes, report accuracy
//! and throughput.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod orchestrate;
pub mod report;
pub mod simulate;

use std::path::{Path, PathBuf};

use agis_core::datatrain::BatchError;
use agis_core::io::FormatError;
use agis_core::{SolveError, StoreError};
use thiserror::Error;

pub use config::{CrashInjection, FaultInjection, RunConfig, Seeds};
pub use manifest::Manifest;
pub use orchestrate::{cmd_solve, SolveOptions, SolveSummary};
pub use report::{cmd_report, cmd_status};
pub use simulate::cmd_simulate;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("not converged: {0}")]
    NotConverged(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Storage(_) | CliError::MissingArtifact(_) => 4,
            CliError::Solve(e) => match e {
                SolveError::InvalidConfig(_) => 2,
                SolveError::Store(_) | SolveError::Executor(_) | SolveError::NonFinite(_) => 4,
                _ => 3,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Storage(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Storage(e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Solve(SolveError::Store(e))
    }
}

impl From<BatchError> for CliError {
    fn from(e: BatchError) -> Self {
        CliError::Solve(e.into())
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir {
            root: root.to_path_buf(),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn truth_catalog(&self) -> PathBuf {
        self.root.join("truth.csv")
    }
    pub fn truth_state(&self) -> PathBuf {
        self.root.join("truth.state")
    }
    pub fn start_catalog(&self) -> PathBuf {
        self.root.join("start.csv")
    }
    pub fn start_state(&self) -> PathBuf {
        self.root.join("start.state")
    }
    pub fn observations(&self) -> PathBuf {
        self.root.join("observations")
    }
    pub fn whiteboard(&self) -> PathBuf {
        self.root.join("whiteboard")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }
    pub fn final_state(&self) -> PathBuf {
        self.root.join("final.state")
    }
    pub fn final_catalog(&self) -> PathBuf {
        self.root.join("final.csv")
    }
    pub fn formal_errors(&self) -> PathBuf {
        self.root.join("formal_errors.csv")
    }
    pub fn solve_report(&self) -> PathBuf {
        self.root.join("solve.json")
    }

    pub fn require(&self, path: PathBuf) -> Result<PathBuf, CliError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingArtifact(path))
        }
    }
}

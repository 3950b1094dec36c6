//! Desk-scale astrometric global iterative solution.
//!
//! The crate is organised the way the data flows:
//!
//! * [`model`] – source propagation, the along-scan measurement equation and
//!   its analytic partial derivatives.
//! * [`simulator`] – scan law, truth catalog, transit search and synthetic
//!   observations.
//! * [`solver`] – the source / attitude / calibration / global block updates,
//!   outer iteration, frame alignment and the secondary solve.
//! * [`whiteboard`] – persistent job table with leases and finite-checked
//!   merging of partial normal equations.
//! * [`datatrain`] – worker runtime that claims jobs and streams observation
//!   blocks through the source update and the block accumulators.
//! * [`io`] – catalog, observation store and state snapshot formats.

pub mod datatrain;
pub mod io;
pub mod model;
pub mod simulator;
pub mod solver;
pub mod units;
pub mod whiteboard;

pub use model::{
    apply_aberration, local_triad, observation_partials, predict_abscissa, propagate_direction,
    Ephemeris, Fov, LocalTriad, ModelError, Observation, ObservationPartials, ObserverState,
    SourceParams,
};
pub use simulator::{NoiseModel, ScanLaw, TruthCatalog};
pub use solver::{
    AttitudeModel, BlockKind, CalibrationTable, ConvergenceReport, GlobalParams,
    PartialNormalEquations, SolveError, SolverConfig, SolverState,
};
pub use whiteboard::{Job, JobId, JobKind, JobState, PartialEnvelope, StoreError};

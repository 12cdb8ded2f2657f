//! Randomized tuning of NMPC design parameters.
//!
//! A candidate controller is described by a shaping vector and a scalar
//! `alpha`; the tuner searches, for each sampled shaping vector, the most
//! demanding `alpha` that still meets a real-time budget on an initial
//! scenario set, then certifies the surviving candidates batch by batch on
//! fresh scenarios.

pub mod artifacts;
pub mod config;
pub mod controller;
pub mod design;
mod error;
pub mod integrator;
pub mod problem;
pub mod run;
pub mod summary;
pub mod tuner;

pub use config::{RunConfig, TimingKind};
pub use controller::{feedback, open_loop_cost, sim_cl, solve, ClosedLoopReport, MpcSetting, OpenLoopResult, TimingMode};
pub use design::{realize, sample_sigma, DesignBounds, DesignVector, PenaltyInterpolation, ShapingVector};
pub use error::{Error, Result};
pub use integrator::{n_steps_for, IntegrationError, PredictionGrid};
pub use problem::{generate_cloud, make_batches, pvtol_problem, Plant, ProblemBounds, ProblemDefinition, ProblemRegistry, Scenario, ScenarioBatchSet};
pub use run::{run, RunOutcome};
pub use summary::{summarize, Summary};
pub use tuner::{required_scenarios, tune, OptimPar, TuningResult};

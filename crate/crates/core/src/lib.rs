//! Controlled open-quantum decision dynamics.
//!
//! This crate models a decision maker whose preference state is a density
//! operator evolving under a Lindblad master equation, discretizes that
//! evolution into a stochastic Kraus channel with projective action
//! measurements, and steers it toward a target action with a Lyapunov-based
//! feedback controller. A statistical harness certifies finite-step
//! stochastic stability conditions on recorded trajectory ensembles.
//!
//! Module map:
//! - [`model`] — behavioral parameters, rate-matrix and generator
//!   construction, exact propagation oracle;
//! - [`discrete`] — Kraus channels, outcome sampling, projective action
//!   measurement;
//! - [`control`] — Lyapunov function, weight selection, feedback law,
//!   control-input constraint checks;
//! - [`engine`] — seeded closed-/open-loop trajectories, ensembles,
//!   persistence, total-probability diagnostics;
//! - [`harness`] — drift estimation, containment bounds, residue-class
//!   convergence checks for arbitrary discrete-time systems.

pub mod control;
pub mod discrete;
pub mod engine;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;

pub use error::{CoreError, Result};
pub use model::{
    BehaviorParams, BeliefVector, CognitiveRateMatrix, DecisionModel, DensityOperator,
    LindbladGenerator, ModelDims, UtilityTable,
};

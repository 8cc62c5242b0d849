//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, discretization, control, and
/// simulation. CLI layers map these onto the exit-code contract.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameter `{name}` = {value}: {requirement}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid density operator: {0}")]
    InvalidDensity(String),

    #[error(
        "discretization validity bound violated: T·dt·(‖H‖ + ½Σγ) = {value:.6} ≥ 1; \
         reduce dt or the interval length"
    )]
    ValidityBoundViolated { value: f64 },

    #[error("degenerate outcome distribution: total probability {total:.3e} < 1e-12")]
    DegenerateDistribution { total: f64 },

    #[error("outcome {index} has zero probability and cannot be applied")]
    ZeroProbabilityOutcome { index: usize },

    #[error("Bayes update degenerate: likelihood normalizer {normalizer:.3e} below 1e-300")]
    ZeroLikelihood { normalizer: f64 },

    #[error("no feasible Lyapunov weights: {detail}")]
    InfeasibleWeights { detail: String },

    #[error("numeric failure in {context}")]
    NumericFailure { context: &'static str },

    #[error("trace too short: need at least {needed} samples, got {got}")]
    TraceTooShort { needed: usize, got: usize },

    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;

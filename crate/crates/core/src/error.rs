//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by validation, certification and the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("feedback gain K is not block-diagonal: nonzero entry at ({row}, {col})")]
    NotBlockDiagonalK { row: usize, col: usize },

    #[error("vertex enumeration too large: {count} vertices exceeds cap {cap}")]
    VertexEnumerationTooLarge { count: usize, cap: usize },

    #[error("horizon too small: N = {0}, need N >= 1")]
    HorizonTooSmall(usize),

    #[error("unknown subsystem id {0}")]
    UnknownSubsystem(usize),

    #[error("input box is unbounded; norm bound requires finite bounds")]
    UnboundedBox,

    #[error("Slater condition violated: min margin {min_margin:.6e} <= 0")]
    SlaterViolated { min_margin: f64 },

    #[error("predicted terminal state is not strictly inside the terminal set (slack {slack:.6e})")]
    PredictedTerminalOutsideXf { slack: f64 },

    #[error(
        "weak coupling condition violated at block {block}: lambda_min(H_ii) = {lambda_min:.6e} \
         <= sum of off-diagonal max singular values {sigma_sum:.6e}"
    )]
    WeakCouplingViolated {
        block: usize,
        lambda_min: f64,
        sigma_sum: f64,
    },

    #[error("local block solve failed to converge")]
    LocalSolveFailed,

    #[error("cost-decrease budget degenerate (delta = {0:.6e}); state has reached the origin")]
    DegenerateDelta(f64),

    #[error(
        "feasibility certificate failed: primal average violates g with worst component {worst:.6e}"
    )]
    FeasibilityCertificateFailed { worst: f64 },

    #[error("certified bound violated at iteration {k}: lhs {lhs:.6e} > rhs {rhs:.6e}")]
    BoundViolated { k: usize, lhs: f64, rhs: f64 },

    #[error(
        "cost-decrease assumption violated at step {t}: f_prev - f(slater) = {lhs:.6e} <= delta = {rhs:.6e}"
    )]
    AssumptionFourViolated { t: usize, lhs: f64, rhs: f64 },

    #[error("Lyapunov decrease violated at step {t}: f_prev = {prev:.6e}, f = {curr:.6e}")]
    LyapunovViolation { t: usize, prev: f64, curr: f64 },

    #[error("instance too large for the exact oracle: {0}")]
    InstanceTooLarge(String),

    #[error("no feasible point found by the exact oracle")]
    Infeasible,

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("validation failed at `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn dims(context: impl Into<String>) -> Self {
        Error::DimensionMismatch(context.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

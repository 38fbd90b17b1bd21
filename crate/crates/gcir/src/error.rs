//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GcirError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    /// A closed-form oracle was called without its degenerate-regime flag,
    /// or with parameters that contradict the requested regime.
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),

    /// Payoffs are defined on the state domain `[0, ∞)`.
    #[error("payoff evaluated at negative state x = {0}")]
    NegativeState(f64),

    #[error("CFL violation: dt = {dt:e} exceeds the stable limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("non-finite PDE value at time level {level}, node {node}")]
    NonFiniteValue { level: usize, node: usize },

    #[error("non-finite state in Euler path {path} at step {step}")]
    NonFiniteState { path: u64, step: usize },

    #[error("query (t = {t}, x = {x}) outside the solution domain")]
    OutOfDomain { t: f64, x: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GcirError>;

pub(crate) fn invalid(msg: impl Into<String>) -> GcirError {
    GcirError::InvalidParameters(msg.into())
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MfgError {
    #[error("invalid parameters: {detail}")]
    InvalidParams { detail: String },

    #[error("operation requires family {expected}, got {got}")]
    WrongFamily { expected: String, got: String },

    #[error("inner minimization failed to converge: {detail}")]
    NonConvexMinimization { detail: String },

    #[error("point clouds have different sizes: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("index out of range: {detail}")]
    IndexOutOfRange { detail: String },

    #[error("non-finite state encountered: {detail}")]
    NonFiniteState { detail: String },

    #[error("regression normal equations are rank-deficient: {detail}")]
    SingularRegression { detail: String },

    #[error("fixed-point iteration did not converge after {iters} iterations (residual {residual})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("homotopy stalled at delta={delta} with step {eta}")]
    HomotopyStall { delta: f64, eta: f64 },

    #[error("measure-flow iteration did not converge after {iters} outer iterations (change {change})")]
    FlowNoConvergence { iters: usize, change: f64 },

    #[error("noise stream key space exhausted: {detail}")]
    StreamExhausted { detail: String },

    #[error("discount condition failed: {detail}")]
    ConditionFailed { detail: String },

    #[error("study aborted: {detail}")]
    StudyAborted { detail: String },

    #[error("serialization error: {detail}")]
    Serialization { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<V> = std::result::Result<V, MfgError>;

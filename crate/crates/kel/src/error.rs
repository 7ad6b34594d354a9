//! Crate-wide error type.
//!
//! Errors are grouped by how the CLI maps them to exit codes: validation
//! errors (exit 2), numerical failures (exit 3), and internal errors (exit 1).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KelError {
    #[error("pair (A, B) is not controllable: stacked rank {rank} < d1 = {d1}")]
    NotControllable { rank: usize, d1: usize },

    #[error("contraction rate not positive: theta1 + theta2 = {sum} >= beta = {beta}")]
    RateNotPositive { sum: f64, beta: f64 },

    #[error("twisted quadratic form gave negative radicand {radicand:e}; check (beta, B) against the states")]
    NonPositiveForm { radicand: f64 },

    #[error("non-finite state at t = {time} in particle {particle}")]
    NonFiniteState { time: f64, particle: usize },

    #[error("grid time {t} is not a whole multiple of h = {h}")]
    GridMismatch { t: f64, h: f64 },

    #[error("reference covariance is numerically singular (cond {cond:.3e} exceeds cap {cap:.1e})")]
    SingularReference { cond: f64, cap: f64 },

    #[error("cloud size {n} exceeds exact-assignment cap {cap}; use the sinkhorn estimator")]
    TooLarge { n: usize, cap: usize },

    #[error("sinkhorn did not converge: marginal violation {violation:.3e} after {iters} iterations")]
    NotConverged { violation: f64, iters: usize },

    #[error("degenerate geometry: zero k-NN radius after jitter")]
    DegenerateGeometry,

    #[error("drift difference leaves range(a2^(1/2)); the entropy bound is +infinity")]
    DriftDifferenceOutsideRange,

    #[error("gramian not positive definite: lambda_min = {lambda_min:.3e} at s = {s}")]
    NotPositiveDefinite { lambda_min: f64, s: f64 },

    #[error("series is degenerate; no rate can be fitted")]
    DegenerateSeries,

    #[error("series value {value} at index {index} is not positive; cannot fit a log rate")]
    NonPositiveValue { value: f64, index: usize },

    #[error("ensemble not stationary: W2(0.8T, T) = {w2:.4e} exceeds tolerance {tol:.4e}")]
    NotStationary { w2: f64, tol: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KelError {
    /// CLI exit code for this error: 2 validation, 3 numerical, 1 internal.
    pub fn exit_code(&self) -> i32 {
        use KelError::*;
        match self {
            Invalid(_) | GridMismatch { .. } | TooLarge { .. } => 2,
            NotControllable { .. }
            | RateNotPositive { .. }
            | NonPositiveForm { .. }
            | NonFiniteState { .. }
            | SingularReference { .. }
            | NotConverged { .. }
            | DegenerateGeometry
            | DriftDifferenceOutsideRange
            | NotPositiveDefinite { .. }
            | DegenerateSeries
            | NonPositiveValue { .. }
            | NotStationary { .. } => 3,
            Io(_) | Json(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, KelError>;

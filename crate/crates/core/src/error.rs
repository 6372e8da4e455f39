use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("mode index {} out of range (system has {modes} modes)", .index + 1)]
    ModeOutOfRange { index: usize, modes: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("inner matrix R + BᵀPB is not positive definite for mode {}", .mode + 1)]
    InnerNotPositiveDefinite { mode: usize },
    #[error("fixed-point iteration did not converge for mode {} after {iterations} iterations", .mode + 1)]
    NotConverged { mode: usize, iterations: usize },
    #[error("matrix is not Schur stable (spectral radius {0})")]
    NotSchurStable(f64),
    #[error("no stabilizable mode found")]
    NoStabilizableMode,
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("worst-case budget overflows for M = {modes}, d = {depth}")]
    BudgetOverflow { modes: usize, depth: usize },
    #[error("enumeration of {count} sequences exceeds the cap of {cap}")]
    EnumerationCap { count: u128, cap: u128 },
    #[error("empty sequence has no first input")]
    EmptySequence,
    #[error("empty planner trace")]
    EmptyTrace,
}

pub type Result<T> = std::result::Result<T, Error>;

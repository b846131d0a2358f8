use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid cost matrix: {0}")]
    InvalidCost(String),
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("invalid coupling: {0}")]
    InvalidCoupling(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("p has mass at index {0} where q is zero")]
    AbsoluteContinuityViolation(usize),
    #[error("cannot pad a distribution of size {from} down to {to}")]
    ShrinkNotAllowed { from: usize, to: usize },
    #[error("marginals carry different mass: {0} vs {1}")]
    InfeasibleMass(f64, f64),
    #[error("solver did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("scaling vector overflow ({0})")]
    NumericalOverflow(&'static str),
    #[error("KL update left the admissible domain")]
    KlDomain,
    #[error("argument out of domain: {0}")]
    DomainError(String),
    #[error("no secant slope fell below the tolerance")]
    NoTransitionFound,
    #[error("problem is infeasible: {0}")]
    Infeasible(String),
    #[error("bad image format: {0}")]
    FormatError(String),
    #[error("image too small: {0}x{1}")]
    TooSmall(usize, usize),
    #[error("a seed is required for marking")]
    SeedRequired,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid Gaussian mixture: {0}")]
    InvalidMixture(String),
    #[error("component {component} is a point mass; continuous density is undefined")]
    PointMass { component: usize },
    #[error("effective noise variance must be positive and finite, got {0}")]
    InvalidNoise(f64),
    #[error("non-finite input at index {0}")]
    NonFiniteInput(usize),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("divergence at iteration {iter}")]
    Divergence { iter: usize },
    #[error("quadrature did not converge (estimated error {error:e})")]
    Quadrature { error: f64 },
    #[error("zero-norm ground truth")]
    ZeroNorm,
    #[error("empty input")]
    Empty,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("tape was recorded at depth {tape}, requested {requested}")]
    TapeMismatch { tape: usize, requested: usize },
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

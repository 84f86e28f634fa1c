use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (even after jitter); a singular kernel with beta = 0 is the usual cause")]
    NotPositiveDefinite,

    #[error("eigendecomposition did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("parameter layout mismatch ({context})")]
    LayoutMismatch { context: &'static str },

    #[error("learning rate {eta0} is outside the convergence window (0, {ceiling}); iterates diverge")]
    DivergentLearningRate { eta0: f64, ceiling: f64 },

    #[error("training diverged: loss grew beyond 1e6x its initial value at step {step}")]
    Diverged { step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at row {row}, column {col}: {message}")]
    ParseError {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised by model construction, fitting and the optimization loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel returned non-finite value {value} for pair ({i}, {j})")]
    KernelEvaluation { i: usize, j: usize, value: f64 },

    #[error("matrix is not positive definite even after jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("kernel exponent {exponent} overflows; parameters are mis-scaled")]
    Overflow { exponent: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure at point {index}: {reason}")]
    Numeric { index: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation failed: {0}")]
    Evaluation(#[from] crate::benchmarks::EvalError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is near-singular (eigenvalue ratio {ratio:e})")]
    NearSingular { ratio: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("sample {0} has no observed entries")]
    EmptySample(usize),

    #[error("observed block of sample {sample} is numerically singular")]
    Conditioning { sample: usize },

    #[error("numerical failure at iteration {iteration}: {what}")]
    Numerical { iteration: usize, what: String },

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("window {window}: {source}")]
    Window {
        window: String,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {what}")]
    Parse { line: usize, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

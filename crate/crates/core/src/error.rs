use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} particles, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("block count {m} does not divide particle count {n}")]
    Arity { n: usize, m: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("no kernel matrix has been built for this grid and c = {0}")]
    KernelNotBuilt(f64),

    #[error("parameter grid too small: {0}")]
    GridTooSmall(String),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

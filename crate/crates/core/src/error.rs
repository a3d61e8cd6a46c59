use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("covariance factorization failed at pivot {pivot}; retry with jitter >= {suggested_jitter:e}")]
    Factorization { pivot: usize, suggested_jitter: f64 },
    #[error("simulation diverged on path {path} at step {step}: {reason}")]
    Simulation {
        path: usize,
        step: usize,
        reason: String,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

use thiserror::Error;

/// Errors raised anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid radius {0}: must be positive and finite")]
    InvalidRadius(f64),

    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("invalid point pattern: {0}")]
    InvalidPattern(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("{0} interaction is not supported for fitting")]
    UnsupportedForFitting(&'static str),

    #[error("wrong interaction kind: expected {expected}, found {found}")]
    WrongSpec {
        expected: &'static str,
        found: &'static str,
    },

    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    Dimension {
        expected: usize,
        found: usize,
        context: &'static str,
    },

    #[error("data points {0} and {1} violate the hard-core distance")]
    InfeasibleData(usize, usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unstable model: {0}")]
    UnstableModel(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

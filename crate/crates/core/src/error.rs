use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite integrand value at v = {v:e}")]
    NonFinite { v: f64 },

    #[error("accuracy error: {0}")]
    Accuracy(String),

    #[error("precondition violated by sample {index}: {reason}")]
    Precondition { index: usize, reason: String },

    #[error("admissibility error: level {level:e} does not exceed the root average {average:e}")]
    Admissibility { level: f64, average: f64 },

    #[error("validation failure: property `{property}` violated on cube {cube}")]
    Validation { property: String, cube: String },

    #[error("singularity: evaluation point coincides with the center of cube {0}")]
    Singularity(usize),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

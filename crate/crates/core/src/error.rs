use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("slice has zero energy")]
    ZeroEnergy,
    #[error("every sampled slice had zero energy")]
    AllSlicesSkipped,
    #[error("requested {requested} hops but the statistic has only {available} entries")]
    TooManyHops { requested: usize, available: usize },
    #[error("Gibbs chain diverged at column {column}, sweep {sweep}: {detail}")]
    Divergence {
        column: usize,
        sweep: usize,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

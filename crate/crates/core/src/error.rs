use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("duplicate samples: columns {0} and {1} of X are identical")]
    DuplicateSamples(usize, usize),

    #[error("overflow guard: dual point {value} at coordinate {index} exceeds the sinh range")]
    Overflow { index: usize, value: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("integration failure: non-finite state at t = {t}")]
    IntegrationFailure { t: f64 },

    #[error("out of scope: {0}")]
    OutOfScope(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}

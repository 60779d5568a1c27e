use thiserror::Error;

/// Errors produced by the samplers, oracles and the toy transformer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// An exact enumeration would exceed its configured size limit.
    #[error("capacity exceeded: {what} needs {needed} entries, limit is {limit}")]
    Capacity {
        what: &'static str,
        needed: f64,
        limit: f64,
    },

    #[error("conditioning event has zero probability")]
    ZeroProbabilityCondition,

    #[error("cache invalid: {0}")]
    CacheInvalid(String),

    /// A policy or driver broke one of its own invariants.
    #[error("internal consistency: {0}")]
    Consistency(String),

    #[error("io: {0}")]
    Io(String),

    #[error("format: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised by the protocol library and simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A primal or dual iterate became NaN or infinite.
    #[error("numeric divergence at coworker {coworker} (virtual time {time})")]
    NumericDivergence { coworker: usize, time: f64 },

    /// A message violated the protocol contract (bad timestamp, bad coefficient, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The event engine detected a broken invariant.
    #[error("engine invariant violated: {0}")]
    Engine(String),

    /// Configuration failed validation; `key` is the dotted path of the offending entry.
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

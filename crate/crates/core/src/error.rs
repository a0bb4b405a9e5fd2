use std::io;

/// Errors produced by the training framework.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's precondition (shapes, lengths, ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Input data contained values the math cannot accept.
    #[error("invalid input: {0}")]
    Input(String),
    /// A configuration failed validation; `field` names the offending key.
    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },
    /// A model, checkpoint, or wire frame could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    /// A JSON-lines file had a malformed record.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    /// The allreduce failed to complete (transport failure or timeout).
    #[error("aggregation failed: {0}")]
    Aggregation(String),
    /// A training run stopped early; `partial` holds the metrics recorded so far.
    #[error("training aborted after {} metric rows: {reason}", partial.rows.len())]
    Aborted {
        reason: String,
        partial: Box<crate::train::Metrics>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

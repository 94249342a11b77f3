use thiserror::Error;

use crate::corpus::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("line {line}: record {id:?} is invalid: {report}")]
    Invalid {
        line: usize,
        id: String,
        report: ValidationReport,
    },

    #[error("duplicate id {id:?} on line {line} (first seen on line {first_line})")]
    DuplicateId {
        id: String,
        first_line: usize,
        line: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at batch {batch}: loss is {loss}")]
    Diverged { batch: usize, loss: f64 },

    #[error("corpus yields no training targets")]
    NoTargets,

    #[error("response has no sentences")]
    NoSentences,

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined: {0}")]
    Undefined(String),
}

use std::path::PathBuf;

use thiserror::Error;

use crate::instruction::InstructionId;
use crate::operators::OperatorKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("malformed record: field `{field}`: {reason}")]
    Parse { field: String, reason: String },

    #[error("gateway error: {0}")]
    Gateway(#[from] GatewayError),

    #[error("{kind} failed for parents {parents:?}: {source}")]
    Operator {
        kind: OperatorKind,
        parents: Vec<InstructionId>,
        #[source]
        source: GatewayError,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("generation aborted: {failed} of {total} operator calls failed")]
    GenerationAborted { failed: usize, total: usize },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Failures of the chat-completion layer.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    /// Missing key, bad URL and similar; raised before any request goes out.
    #[error("gateway misconfigured: {0}")]
    Config(String),

    #[error("API returned status {status}: {detail}")]
    Status { status: u16, detail: String },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("gave up after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: u32, last: Box<GatewayError> },

    #[error("unexpected response body: {0}")]
    Response(String),

    #[error("mock backend: {0}")]
    Mock(String),
}

impl GatewayError {
    /// Timeouts, 429 and 5xx are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Status { status, .. } => *status == 429 || (500..600).contains(status),
            GatewayError::Transport(_) => true,
            _ => false,
        }
    }
}

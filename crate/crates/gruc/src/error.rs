//! Crate-wide error type.
//!
//! Every fallible path funnels into [`Error`]. The split matters to the CLI:
//! anything that reaches `main` other than a usage mistake maps to the data
//! exit code, and `NoCandidates` is the one variant callers are expected to
//! branch on (training skips the instance, inference reports it).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between tensors or against a declared dimension.
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension { context: String, detail: String },

    /// Input outside an operation's domain (empty graph, negative rate, ...).
    #[error("domain error in {context}: {detail}")]
    Domain { context: String, detail: String },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Fact retrieval or filtering left nothing to reason over.
    #[error("no candidate facts remain for instance `{instance}`")]
    NoCandidates { instance: String },

    /// Malformed text input (embedding table rows, JSONL lines).
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Structurally valid input that violates the instance schema.
    #[error("schema violation in instance `{instance}`: {message}")]
    Schema { instance: String, message: String },

    /// Semantic problems in otherwise well-formed data.
    #[error("data error: {0}")]
    Data(String),

    /// Corrupt, truncated, or incompatible checkpoint bytes.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn dimension(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn domain(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Domain {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

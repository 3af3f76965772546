use std::path::PathBuf;

use thiserror::Error;

use crate::data::RegionId;

/// Errors produced anywhere in the retrieval engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Vector could not be scaled to unit length.
    #[error("cannot normalize vector: {0}")]
    Normalization(&'static str),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    /// A query carried neither a text nor a reference-image embedding.
    #[error("query has neither a text nor a reference-image embedding")]
    EmptyQuery,

    #[error("unknown region id {0}")]
    UnknownRegion(RegionId),

    #[error("invalid intent state: {0}")]
    InvalidState(String),

    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),

    #[error("invalid cost matrix: {0}")]
    InvalidCost(String),

    /// Target and distractor are indistinguishable, so no penalty weight separates them.
    #[error("degenerate instance: sim(target, distractor) = {sim_td} is not below 1")]
    DegenerateInstance { sim_td: f64 },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("ranked input is not sorted by descending score at position {0}")]
    SortOrder(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Feedback arrived for a session that already terminated or moved on.
    #[error("session conflict: {0}")]
    Conflict(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Format {
            context: context.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

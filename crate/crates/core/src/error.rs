//! Shared error type for the crate.

/// Errors produced anywhere in the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape rules for a graph op were violated; names the offending node.
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    /// A forward op produced NaN or infinity.
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    /// Graph misuse (unbound input, backward before forward, missing node).
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid configuration or precondition violation.
    #[error("invalid config: {0}")]
    Config(String),

    /// Invalid runtime input (token out of range, empty response, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Gradient check could not be completed at a specific coordinate.
    #[error("gradient check failed at param {param} index {index}: {detail}")]
    GradCheck {
        param: usize,
        index: usize,
        detail: String,
    },

    /// A serialized file failed to parse; carries the 1-based line number.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// A proposer response line failed the `[what] -> [what]` grammar.
    #[error("proposal line {line:?} rejected: {reason}")]
    Proposal { line: String, reason: String },

    /// Checkpoint digest or header verification failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

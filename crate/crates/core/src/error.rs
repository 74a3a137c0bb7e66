use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A rollout group is too small to normalize.
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Sequences or tables that must be aligned are not.
    #[error("shape error: {0}")]
    Shape(String),
    /// A group violates the mixed-correctness side condition.
    #[error("constraint violated: {0}")]
    Constraint(String),
    /// Input failed validation (non-stochastic attention, bad config, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// The requested operation is not available for this input.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// A non-finite value appeared in the named term.
    #[error("non-finite value in {term}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { term: String, step: Option<u64> },
    /// Configuration could not be parsed or an override path is unknown.
    #[error("config error: {0}")]
    Config(String),
    /// Checkpoint file is malformed or does not match the architecture.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("persistence failed after step {last_durable_step:?}: {source}")]
    Persistence {
        last_durable_step: Option<u64>,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn numeric(term: impl Into<String>) -> Self {
        Error::Numeric {
            term: term.into(),
            step: None,
        }
    }

    /// Attaches a step index to numeric errors; other variants pass through.
    pub fn at_step(self, step: u64) -> Self {
        match self {
            Error::Numeric { term, .. } => Error::Numeric {
                term,
                step: Some(step),
            },
            other => other,
        }
    }
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A model was evaluated outside its physical domain in strict mode.
    #[error("model domain violation: {0}")]
    Domain(String),

    /// An operation was called with arguments that violate its preconditions.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A state or derived quantity stopped being finite.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// A simulation produced a non-finite state; `t_last` is the last time
    /// at which the state was still finite.
    #[error("simulation diverged after t = {t_last}: {detail}")]
    Diverged { t_last: f64, detail: String },

    /// The requested operation needs a model capability that is not available.
    #[error("capability missing: {0}")]
    Capability(String),

    /// Configuration text could not be parsed as JSON.
    #[error("config parse error: {0}")]
    Parse(String),

    /// Configuration parsed but failed validation; every violated rule is
    /// listed.
    #[error("invalid config:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    /// Filesystem failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameters or configuration that fail validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numerical primitive was evaluated outside the region where it is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// A checked invariant failed; results computed past this point are meaningless.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Io { .. } => 2,
            Error::Domain(_)
            | Error::NonConvergence { .. }
            | Error::Invariant(_)
            | Error::LinearSolve(_) => 3,
        }
    }
}

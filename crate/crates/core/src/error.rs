use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,

    #[error("template error: {0}")]
    Template(String),

    #[error("backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },

    #[error("backend `{backend}` returned status {status}: {body}")]
    BackendStatus {
        backend: String,
        status: u16,
        body: String,
    },

    #[error("scripted backend `{backend}`: {message}")]
    Script { backend: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("anchor target {target} is infeasible; achievable mean recall is [{min:.3}, {max:.3}]")]
    InfeasibleAnchor { target: f64, min: f64, max: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

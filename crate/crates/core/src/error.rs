use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("episode sampling error: class {class} has {available} examples, needs {required}")]
    EpisodeSampling {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("episode sampling error: {0}")]
    EpisodeRequest(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("estimation error: class {class} has no examples")]
    EmptyClass { class: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("diagnostics unavailable: {0}")]
    DiagnosticsUnavailable(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("replay mismatch in `{field}`: recorded {recorded}, recomputed {recomputed}")]
    ReplayMismatch {
        field: String,
        recorded: String,
        recomputed: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

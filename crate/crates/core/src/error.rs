use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("non-finite value in {stage}: {detail}")]
    NonFinite { stage: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error in `{field}`: {detail}")]
    Ingestion { field: String, detail: String },

    #[error("construction check failed: {0}")]
    Construction(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("latent diverged at step {step}: norm {norm:e}")]
    Divergence { step: usize, norm: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
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

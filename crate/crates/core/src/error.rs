use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty manifest: {0}")]
    EmptyManifest(PathBuf),

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    #[error("invalid tile: {0}")]
    InvalidTile(String),

    #[error("invalid stain style: {0}")]
    InvalidStyle(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("insufficient tissue: {0}")]
    InsufficientTissue(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("no training performed: {0}")]
    NoTraining(String),

    #[error("single-class input: both labels must be present")]
    SingleClass,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

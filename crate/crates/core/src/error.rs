use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// A raster or manifest does not match the modality schema.
    #[error("schema error: {0}")]
    Schema(String),
    /// A sample failed to load or validate.
    #[error("sample {sample}, modality {modality}: {reason}")]
    Load { sample: String, modality: String, reason: String },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    /// Training or inference produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error on {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}

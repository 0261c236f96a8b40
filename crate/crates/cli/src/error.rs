use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing {what} at {}; run `voxface {stage}` first", path.display())]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        stage: &'static str,
    },

    #[error("`{stage}` artifacts were produced with config hash {found}, current config hashes to {expected}; rerun `voxface {stage}`")]
    ConfigMismatch {
        stage: &'static str,
        found: String,
        expected: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] voxface::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

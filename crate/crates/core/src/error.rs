use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the voxface pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate measurement `{am}`: {reason}")]
    DegenerateMeasurement { am: String, reason: String },

    #[error("measurement errors: {}", .0.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; "))]
    Measurements(Vec<(String, Box<Error>)>),

    #[error("unknown landmark `{0}`")]
    UnknownLandmark(String),

    #[error("invalid definition: {0}")]
    InvalidDefinition(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("zero variance for `{0}`")]
    ZeroVariance(String),

    #[error("not enough samples: need at least {needed}, got {got} ({context})")]
    NotEnoughSamples {
        needed: usize,
        got: usize,
        context: &'static str,
    },

    #[error("input too short: need at least {needed} {unit}, got {got}")]
    TooShort {
        needed: usize,
        got: usize,
        unit: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("split misuse: {0}")]
    SplitMisuse(String),

    #[error("speaker mismatch: `{left}` vs `{right}`")]
    SpeakerMismatch { left: String, right: String },

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("bad file format ({path}): {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the separation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },

    #[error("inconsistent dimensions: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("undefined SI-SDR: reference signal has zero energy")]
    UndefinedSiSdr,

    #[error("permutation search too large: {0} sources (at most 6 supported)")]
    PermutationSearchTooLarge(usize),

    #[error("unachievable rt60 {rt60:.3} s for a room of volume {volume:.1} m^3 (required absorption {absorption:.3} > 1)")]
    UnachievableRt60 {
        rt60: f64,
        volume: f64,
        absorption: f64,
    },

    #[error("scenario sampling failed after {0} rejected draws")]
    SamplingExhausted(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (as opposed to internal failures).
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite(_) | Error::Shape(_))
    }
}

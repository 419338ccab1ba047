use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}:{line}: {message}")]
    MalformedCsv {
        file: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{file}: duplicate record for station {station} at {timestamp}")]
    DuplicateRecord {
        file: PathBuf,
        station: String,
        timestamp: String,
    },

    #[error("no stations survive filtering")]
    NoStationsSurvive,

    #[error("pollutant {0} has no valid observations")]
    EmptyChannel(&'static str),

    #[error("pollutant {0} has a degenerate range (min == max)")]
    DegenerateChannel(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter {0} does not participate in the graph")]
    Detached(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(u64),

    #[error("mask selects no entries")]
    EmptyMask,

    #[error("r2 is undefined: targets have zero variance")]
    ZeroVariance,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Errors caused by bad inputs or configuration rather than by a failure
    /// while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MalformedCsv { .. }
                | Error::DuplicateRecord { .. }
                | Error::InvalidArgument(_)
                | Error::Shape(_)
                | Error::NoStationsSurvive
                | Error::EmptyChannel(_)
                | Error::DegenerateChannel(_)
                | Error::InsufficientData(_)
        )
    }
}

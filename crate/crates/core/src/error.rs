use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("format error in column `{column}`: {message}")]
    Format { column: String, message: String },

    #[error("duplicate record for date {date}, hour {hour}, station {station_id}")]
    DuplicateRecord {
        date: NaiveDate,
        hour: u8,
        station_id: u32,
    },

    #[error("case references unknown station {station_id}")]
    UnknownStation { station_id: u32 },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("probability {0} outside the open interval (0, 1)")]
    Domain(f64),

    #[error("too few training cases: {found} available, {required} required")]
    TooFewCases { found: usize, required: usize },

    #[error("optimizer diverged: mean CRPS non-finite at every restart")]
    Divergence,

    #[error("predictive variance is not positive ({0})")]
    ZeroVariance(f64),

    #[error("member {member} is constant across the window; slope not identifiable")]
    DegenerateRegressor { member: usize },

    #[error("missing observation for date {date}, hour {hour}, station {station_id}")]
    MissingObservation {
        date: NaiveDate,
        hour: u8,
        station_id: u32,
    },

    #[error("insufficient data for station {station_id}: {message}")]
    InsufficientData { station_id: u32, message: String },

    #[error("score differences have zero variance but nonzero mean {mean}")]
    ZeroVarianceDifferences { mean: f64 },

    #[error("series misaligned: {0}")]
    Alignment(String),

    #[error("invalid configuration: {0}")]
    Config(String),
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

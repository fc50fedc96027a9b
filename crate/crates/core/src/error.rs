use crate::types::{MeasurementStatus, Timestamp};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("measurement rejected: status {0:?}")]
    RejectedMeasurement(MeasurementStatus),

    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("correspondence error: {0}")]
    Correspondence(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("skew estimate used before initial synchronization")]
    Uninitialized,

    #[error("synchronization with client {client} timed out")]
    SyncTimeout { client: u8 },

    #[error("channel busy until {until}")]
    ChannelBusy { until: Timestamp },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("misaligned inputs: {0}")]
    Alignment(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateGeometry(_)
                | Error::InsufficientPoints { .. }
                | Error::Correspondence(_)
        )
    }
}

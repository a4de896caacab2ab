use std::path::PathBuf;

use rfprint_nn::NnError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed IQ file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },
    #[error("recording has {samples} samples, shorter than slice length {slice_length}")]
    RecordingTooShort { samples: usize, slice_length: usize },
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("device {0} has no slices")]
    EmptyDeviceRow(usize),
    #[error("improvement undefined for a zero baseline")]
    ZeroBaseline,
    #[error("hypothesis mismatch: {0}")]
    HypothesisMismatch(String),
    #[error("impersonation target equals the transmitting device {0}")]
    SameDevice(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<NnError> for Error {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io(io) => Error::Io(io),
            NnError::Json(j) => Error::Json(j),
            other => Error::Shape(other.to_string()),
        }
    }
}

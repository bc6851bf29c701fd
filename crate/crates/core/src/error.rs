use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("pixel ({row}, {col}) outside {width}x{height} image")]
    PixelOutOfBounds {
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },
    #[error("coordinate {value} on axis {axis} outside normalized scene bounds")]
    OutOfSceneBounds { axis: usize, value: f64 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("empty sample slice for ray")]
    EmptySamples,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("insufficient overlap: {found} surviving pairs, need {required}")]
    InsufficientOverlap { found: usize, required: usize },
    #[error("selection budget {budget} invalid for {dims} dimensions")]
    InvalidBudget { budget: usize, dims: usize },
    #[error("problem too large for exhaustive search: {dims} dimensions (max {max})")]
    TooLarge { dims: usize, max: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("need at least {required} correspondences, got {got}")]
    NotEnoughCorrespondences { required: usize, got: usize },
    #[error("localization failed: {0}")]
    LocalizationFailed(String),
    #[error("frustum does not intersect the scene bounds")]
    FrustumMissesScene,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-unit vector (norm {0})")]
    NonUnit(f64),
    #[error("predictor has not been trained")]
    Untrained,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }
}

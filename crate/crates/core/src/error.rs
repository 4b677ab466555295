use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("keypoint {joint} at ({x}, {y}) lies outside the {width}x{height} heatmap grid")]
    OutOfBounds { joint: usize, x: f64, y: f64, width: usize, height: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("channel {0} has no finite values")]
    NonFiniteChannel(usize),

    #[error("no visible keypoints to evaluate")]
    NoVisibleJoints,

    #[error("empty sample set passed to a discrepancy estimator")]
    EmptyBatch,

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("non-finite {stage} loss at iteration {iteration}: {detail}")]
    NonFinite { stage: String, iteration: usize, detail: String },

    #[error("pose sampling gave up after {0} rejected attempts")]
    RejectionLimit(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format { path: path.into(), message: message.into() }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("volume is already normalized")]
    AlreadyNormalized,

    #[error("volume must be normalized first")]
    NotNormalized,

    #[error("coordinate {index} outside grid of size {size} on axis {axis}")]
    OutOfBounds { axis: usize, index: f64, size: usize },

    #[error("mask has no foreground voxels")]
    EmptyForeground,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("metaimage header {path}: {message}")]
    Header { path: PathBuf, message: String },

    #[error("metaimage payload holds {actual} bytes, header implies {expected}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("unsupported metaimage element type {0}")]
    UnsupportedElementType(String),

    #[error("annotations: missing column {0}")]
    MissingColumn(String),

    #[error("annotations row {row}: {message}")]
    AnnotationRow { row: usize, message: String },

    #[error("yolo label line {line}: {message}")]
    LabelLine { line: usize, message: String },

    #[error("could not place {requested} nodules without overlap (placed {placed})")]
    Unplaceable { requested: usize, placed: usize },

    #[error("need at least {needed} items to fill the partitions, got {got}")]
    TooFewItems { needed: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset has no positive labels")]
    NoPositiveLabels,

    #[error("class {0} has no samples")]
    MissingClass(String),

    #[error("non-finite loss at step {step} (learning rate {learning_rate})")]
    NonFiniteLoss { step: u64, learning_rate: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage { stage: &'static str, source: Box<Error> },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}

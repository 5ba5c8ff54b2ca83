use sketchmod_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SketchError {
    #[error("stroke has no points")]
    EmptyStroke,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("invalid stroke: {0}")]
    InvalidStroke(String),
    #[error("sketch has no strokes")]
    EmptySketch,
    #[error("sketch has {found} strokes, limit is {limit}")]
    TooManyStrokes { found: usize, limit: usize },
    #[error("sketch {sketch} has {found} strokes, need at least 2")]
    TooFewStrokes { sketch: usize, found: usize },
    #[error("target sketch is empty")]
    EmptyTarget,
    #[error("index {index} out of range for {len} strokes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("override for stroke {0} is not finite")]
    NonFiniteOverride(usize),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("sample {0} has no valid stroke to attend to")]
    MaskAllFalse(usize),
    #[error("parse error in record {record}: {msg}")]
    Parse { record: usize, msg: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("dataset is empty")]
    DataEmpty,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("checkpoint config hash {found} does not match {expected}")]
    CheckpointMismatch { expected: String, found: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<std::io::Error> for SketchError {
    fn from(err: std::io::Error) -> Self {
        SketchError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SketchError>;

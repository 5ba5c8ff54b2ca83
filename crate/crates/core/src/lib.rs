pub mod dataio;
pub mod edit;
pub mod error;
pub mod geometry;
pub mod network;
pub mod training;

pub use error::{Result, SketchError};
pub use geometry::{
    apply_attributes, canvas_normalize, corrupt_attributes, denormalize_stroke, normalize_stroke, offset_between,
    resample_stroke, CorruptionNoise, NormalizedStroke, OffsetAttributes, PenState, Point, Sketch, Stroke,
    StrokeAttributes,
};

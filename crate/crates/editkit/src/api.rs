//! Wire types for the HTTP service. Sketches and strokes use the versioned
//! JSON format of the core crate; the schemas live in `schema/`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sketchmod::edit::{EditMode, EditResult};
use sketchmod::network::ModelConfig;
use sketchmod::{Sketch, Stroke, StrokeAttributes};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config: ModelConfig,
    pub config_hash: String,
    /// SHA-256 over every parameter.
    pub content_hash: String,
    pub stage: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterPayload {
    pub size: usize,
    /// 8-bit grayscale PNG, white ink on black.
    pub png_base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub mode: EditMode,
    pub edited: Sketch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_attributes: Option<StrokeAttributes>,
    pub attributes: Vec<StrokeAttributes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Sketch>,
    pub svg: String,
    pub raster: RasterPayload,
}

impl EditResponse {
    pub fn from_result(r: &EditResult) -> sketchmod::Result<Self> {
        Ok(EditResponse {
            mode: r.mode,
            edited: r.edited.clone(),
            refined_attributes: r.refined_attributes,
            attributes: r.attributes.clone(),
            source_index: r.source_index,
            geometry: r.geometry.clone(),
            svg: r.svg(),
            raster: RasterPayload {
                size: r.raster.size,
                png_base64: STANDARD.encode(r.raster.to_png()?),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizeRequest {
    pub stroke: Stroke,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizeResponse {
    pub attributes: StrokeAttributes,
    /// The stroke in its canonical frame.
    pub normalized: Stroke,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructRequest {
    pub sketch: Sketch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_temperature: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// Stable machine-readable code, e.g. `invalid_request`.
    pub error: String,
    pub message: String,
    /// JSON path of the offending field for schema violations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

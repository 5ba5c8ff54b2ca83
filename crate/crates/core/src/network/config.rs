use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::BatchConfig;
use crate::error::{Result, SketchError};

/// How the refiner sees the other strokes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Normalized embeddings plus pairwise offset embeddings.
    #[default]
    Offset,
    /// Normalized embeddings plus a projection of each stroke's own
    /// attributes; plain attention.
    AttributeOnly,
    /// Un-normalized embeddings; plain attention.
    Plain,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Offset, Variant::AttributeOnly, Variant::Plain];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Offset => "offset",
            Variant::AttributeOnly => "attribute_only",
            Variant::Plain => "plain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_refiner_layers: usize,
    pub n_mixer_layers: usize,
    pub n_mixer_heads: usize,
    pub n_points: usize,
    pub n_mixtures: usize,
    pub image_size: usize,
    pub k_max: usize,
    pub variant: Variant,
    pub single_stage: bool,
    pub encoder_hidden: usize,
    pub predictor_hidden: usize,
    pub offset_hidden: usize,
    /// FFN width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub seq_hidden: usize,
    pub img_hidden: usize,
    /// Channels of the 8×8 seed grid in the image decoder; halved at each
    /// upsampling stage.
    pub img_channels: usize,
    pub std_min: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_refiner_layers: 3,
            n_mixer_layers: 4,
            n_mixer_heads: 4,
            n_points: 32,
            n_mixtures: 5,
            image_size: 64,
            k_max: 25,
            variant: Variant::Offset,
            single_stage: false,
            encoder_hidden: 256,
            predictor_hidden: 256,
            offset_hidden: 128,
            ffn_mult: 4,
            seq_hidden: 256,
            img_hidden: 256,
            img_channels: 32,
            std_min: 1e-3,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SketchError::Config(m.into()));
        if self.d_model == 0 {
            return bad("d_model must be positive");
        }
        if self.n_refiner_layers == 0 {
            return bad("n_refiner_layers must be at least 1");
        }
        if self.n_mixer_heads == 0 || !self.d_model.is_multiple_of(self.n_mixer_heads) {
            return bad("d_model must be divisible by n_mixer_heads");
        }
        if self.n_points < 2 {
            return bad("n_points must be at least 2");
        }
        if self.n_mixtures == 0 || self.k_max == 0 || self.ffn_mult == 0 {
            return bad("n_mixtures, k_max and ffn_mult must be positive");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return bad("image_size must be a positive multiple of 8");
        }
        if self.img_channels < 4 {
            return bad("img_channels must be at least 4");
        }
        if [
            self.encoder_hidden,
            self.predictor_hidden,
            self.offset_hidden,
            self.seq_hidden,
            self.img_hidden,
        ]
        .contains(&0)
        {
            return bad("hidden sizes must be positive");
        }
        if !(self.std_min > 0.0) || !(self.ln_eps > 0.0) {
            return bad("std_min and ln_eps must be positive");
        }
        Ok(())
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            n_points: self.n_points,
            image_size: self.image_size,
            k_max: self.k_max,
        }
    }

    /// Parameters emitted by the sequence head per point.
    pub fn step_params(&self) -> usize {
        6 * self.n_mixtures + 3
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// A small configuration used by tests and quick experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_refiner_layers: 2,
            n_mixer_layers: 1,
            n_mixer_heads: 2,
            n_points: 4,
            n_mixtures: 2,
            image_size: 8,
            k_max: 25,
            encoder_hidden: 8,
            predictor_hidden: 8,
            offset_hidden: 6,
            ffn_mult: 2,
            seq_hidden: 8,
            img_hidden: 8,
            img_channels: 4,
            ..ModelConfig::default()
        }
    }
}

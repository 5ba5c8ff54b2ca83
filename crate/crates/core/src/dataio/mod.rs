//! Data ingestion, synthetic sketches, batching and rendering.

pub mod batch;
pub mod cache;
pub mod quickdraw;
pub mod raster;
pub mod svg;
pub mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use batch::{
    make_batch, make_batch_from_sketches, make_batch_seeded, prepare_all, sample_corruption, BatchConfig,
    PreparedSketch, PreparedStroke, SketchBatch, POINT_FEATURES,
};
pub use cache::{load_dataset, save_dataset};
pub use quickdraw::{load_quickdraw, LoadReport};
pub use raster::{rasterize, Raster};
pub use svg::{export_svg, export_svg_with, import_svg, SvgOptions};
pub use synth::{generate_synthetic, SyntheticCategory};

use crate::error::{Result, SketchError};
use crate::geometry::Sketch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Quickdraw { path: PathBuf },
    Synthetic { seed: u64, n: usize },
    Cache { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub k_max: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<Sketch>,
    pub valid: Vec<Sketch>,
    pub test: Vec<Sketch>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SketchError::Config(format!(
                "split fractions {:?} must sum to 1",
                self.split
            )));
        }
        Ok(())
    }

    /// Loads every sketch and cuts it into contiguous splits.
    pub fn load(&self) -> Result<Splits> {
        self.validate()?;
        let all = match &self.source {
            DatasetSource::Quickdraw { path } => load_quickdraw(path, self.k_max)?.sketches,
            DatasetSource::Synthetic { seed, n } => generate_synthetic(*seed, *n),
            DatasetSource::Cache { path } => load_dataset(path)?,
        };
        if all.is_empty() {
            return Err(SketchError::DataEmpty);
        }
        let n = all.len();
        let n_train = (self.split[0] * n as f64).round() as usize;
        let n_valid = ((self.split[1] * n as f64).round() as usize).min(n - n_train);
        let mut it = all.into_iter();
        Ok(Splits {
            train: it.by_ref().take(n_train).collect(),
            valid: it.by_ref().take(n_valid).collect(),
            test: it.collect(),
        })
    }
}

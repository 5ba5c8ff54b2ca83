//! Checkpoint files and model cards.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sketchmod_tensor::Checkpoint;

use super::config::ModelConfig;
use super::model::SketchMod;
use crate::error::{Result, SketchError};

pub const CHECKPOINT_KIND: &str = "sketchmod-model";

/// Metadata stored in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub config: ModelConfig,
    pub config_hash: String,
    /// Training stage that produced the weights, e.g. `stage1`.
    pub stage: String,
}

impl SketchMod {
    pub fn to_checkpoint(&self, stage: &str) -> Checkpoint {
        let meta = ModelMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config().clone(),
            config_hash: self.config().hash(),
            stage: stage.into(),
        };
        Checkpoint {
            metadata: serde_json::to_string(&meta).expect("metadata serializes"),
            tensors: self.params().named_tensors(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(SketchMod, ModelMeta)> {
        let meta: ModelMeta =
            serde_json::from_str(&ck.metadata).map_err(|e| SketchError::Config(format!("checkpoint metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(SketchError::Config(format!("not a model checkpoint: {:?}", meta.kind)));
        }
        let hash = meta.config.hash();
        if hash != meta.config_hash {
            return Err(SketchError::CheckpointMismatch {
                expected: meta.config_hash.clone(),
                found: hash,
            });
        }
        let mut model = SketchMod::new(meta.config.clone(), 0)?;
        model.params_mut().load_named(&ck.tensors)?;
        Ok((model, meta))
    }

    /// Writes the checkpoint and a model card beside it (`<path>.card.txt`).
    pub fn save(&self, path: impl AsRef<Path>, stage: &str) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.to_checkpoint(stage).save(path)?;
        std::fs::write(card_path(path), self.model_card(stage))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(SketchMod, ModelMeta)> {
        let ck = Checkpoint::load(path)?;
        SketchMod::from_checkpoint(&ck)
    }

    /// Loads a checkpoint and insists its config hash equals `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &str) -> Result<(SketchMod, ModelMeta)> {
        let (model, meta) = SketchMod::load(path)?;
        if meta.config_hash != expected {
            return Err(SketchError::CheckpointMismatch {
                expected: expected.into(),
                found: meta.config_hash,
            });
        }
        Ok((model, meta))
    }

    pub fn model_card(&self, stage: &str) -> String {
        let config = serde_json::to_string_pretty(self.config()).expect("config serializes");
        format!(
            "sketchmod model\nstage: {stage}\nconfig_hash: {}\nparameters: {}\nscalars: {}\ncontent_hash: {}\nconfig:\n{config}\n",
            self.config().hash(),
            self.params().len(),
            self.params().num_scalars(),
            self.content_hash(),
        )
    }
}

pub fn card_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".card.txt");
    name.into()
}

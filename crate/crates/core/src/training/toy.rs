//! The seed-fixed toy run (64 synthetic sketches) shared by tests, with an
//! on-disk cache so each configuration trains once per build directory.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{load_for_stage2, train, Stage, TrainConfig, TrainReport};
use crate::dataio::{generate_synthetic, prepare_all, PreparedSketch};
use crate::error::Result;
use crate::network::{SketchMod, Variant};

/// Bump when training code changes in a way that invalidates cached runs.
pub const FIXTURE_REVISION: u32 = 2;

static LOCK: Mutex<()> = Mutex::new(());

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub train_seed: u64,
    pub n_train: usize,
    pub heldout_seed: u64,
    pub n_heldout: usize,
    pub stage1: TrainConfig,
    pub stage2_epochs: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            train_seed: 7,
            n_train: 64,
            heldout_seed: 1007,
            n_heldout: 32,
            stage1: TrainConfig::default(),
            stage2_epochs: 200,
        }
    }
}

/// A finished run: checkpoint path and its training log.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub checkpoint: PathBuf,
    pub report: TrainReport,
    /// True when the run was trained now rather than read from the cache.
    pub fresh: bool,
}

impl ToyRun {
    pub fn model(&self) -> Result<SketchMod> {
        Ok(SketchMod::load(&self.checkpoint)?.0)
    }
}

impl ToySpec {
    pub fn key(&self) -> String {
        let json = serde_json::to_string(&(self, FIXTURE_REVISION)).expect("spec serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(6)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn train_data(&self) -> Result<Vec<PreparedSketch>> {
        let sketches = generate_synthetic(self.train_seed, self.n_train);
        prepare_all(&sketches, &self.stage1.model.batch_config())
    }

    pub fn heldout_data(&self) -> Result<Vec<PreparedSketch>> {
        let sketches = generate_synthetic(self.heldout_seed, self.n_heldout);
        prepare_all(&sketches, &self.stage1.model.batch_config())
    }

    fn dir(&self, root: &Path) -> PathBuf {
        root.join(format!("toy-{}", self.key()))
    }

    pub fn stage2_config(&self, variant: Variant) -> TrainConfig {
        TrainConfig {
            stage: Stage::Stage2,
            variant,
            epochs: self.stage2_epochs,
            ..self.stage1.clone()
        }
    }

    /// Single-stage config at the same total epoch count as the two-stage run.
    pub fn single_stage_config(&self) -> TrainConfig {
        TrainConfig {
            stage: Stage::SingleStage,
            epochs: self.stage1.epochs + self.stage2_epochs,
            ..self.stage1.clone()
        }
    }

    pub fn stage1(&self, root: &Path) -> Result<ToyRun> {
        let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
        self.stage1_locked(root)
    }

    fn stage1_locked(&self, root: &Path) -> Result<ToyRun> {
        let cfg = TrainConfig {
            stage: Stage::Stage1,
            ..self.stage1.clone()
        };
        cached(&self.dir(root), "stage1", &cfg, || {
            let mut model = SketchMod::new(cfg.model_config(), cfg.seed)?;
            let report = train(&mut model, &self.train_data()?, &cfg, |_| {})?;
            Ok((model, report))
        })
    }

    pub fn stage2(&self, root: &Path, variant: Variant) -> Result<ToyRun> {
        let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let s1 = self.stage1_locked(root)?;
        let cfg = self.stage2_config(variant);
        cached(&self.dir(root), &format!("stage2-{}", variant.name()), &cfg, || {
            let mut model = load_for_stage2(&s1.checkpoint, &cfg)?;
            let report = train(&mut model, &self.train_data()?, &cfg, |_| {})?;
            Ok((model, report))
        })
    }

    pub fn single_stage(&self, root: &Path) -> Result<ToyRun> {
        let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let cfg = self.single_stage_config();
        cached(&self.dir(root), "single_stage", &cfg, || {
            let mut model = SketchMod::new(cfg.model_config(), cfg.seed)?;
            let report = train(&mut model, &self.train_data()?, &cfg, |_| {})?;
            Ok((model, report))
        })
    }
}

fn cached(
    dir: &Path,
    name: &str,
    cfg: &TrainConfig,
    run: impl FnOnce() -> Result<(SketchMod, TrainReport)>,
) -> Result<ToyRun> {
    let ckpt = dir.join(format!("{name}.ckpt"));
    let log = dir.join(format!("{name}.jsonl"));
    if ckpt.exists() && log.exists() {
        let (model, _) = SketchMod::load(&ckpt)?;
        let text = std::fs::read_to_string(&log)?;
        let report = TrainReport::from_jsonl(&text, cfg.stage, cfg.variant, cfg.seed, &model.config().hash())?;
        return Ok(ToyRun {
            checkpoint: ckpt,
            report,
            fresh: false,
        });
    }
    std::fs::create_dir_all(dir)?;
    let (model, report) = run()?;
    let tmp = dir.join(format!("{name}.ckpt.partial"));
    model.save(&tmp, cfg.stage.name())?;
    std::fs::rename(&tmp, &ckpt)?;
    std::fs::rename(crate::network::card_path(&tmp), crate::network::card_path(&ckpt))?;
    std::fs::write(&log, report.to_jsonl())?;
    Ok(ToyRun {
        checkpoint: ckpt,
        report,
        fresh: true,
    })
}

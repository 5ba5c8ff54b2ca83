//! Stage I, stage II and single-stage training loops and the attribute
//! recovery evaluation.

mod fit;
mod recovery;
pub mod toy;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sketchmod_tensor::{cosine_lr, AdamW, AdamWConfig, ParamId, Tape};

pub use fit::{fit_metrics, FitMetrics};
pub use recovery::{evaluate_recovery, GroundTruthRefiner, RecoveryMetrics, Refinement, SourceRefiner};

use crate::dataio::{make_batch_seeded, PreparedSketch, SketchBatch};
use crate::error::{Result, SketchError};
use crate::network::{ModelConfig, SketchMod, Variant, STAGE1_GROUPS, STAGE2_GROUPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Stage1,
    Stage2,
    SingleStage,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::SingleStage => "single_stage",
        }
    }

    /// Parameter-name prefixes the stage optimizes; `None` means all.
    pub fn groups(self) -> Option<&'static [&'static str]> {
        match self {
            Stage::Stage1 => Some(&STAGE1_GROUPS),
            Stage::Stage2 => Some(&STAGE2_GROUPS),
            Stage::SingleStage => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub stage: Stage,
    pub variant: Variant,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 200,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            grad_clip: Some(5.0),
            seed: 7,
            stage: Stage::Stage1,
            variant: Variant::Offset,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Batch size used for full-scale runs.
    pub const FULL_BATCH_SIZE: usize = 80;

    pub fn full() -> Self {
        TrainConfig {
            batch_size: Self::FULL_BATCH_SIZE,
            model: ModelConfig {
                n_mixtures: 20,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    /// Model config with this run's variant and stage flags applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            single_stage: self.stage == Stage::SingleStage,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(SketchError::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.peak_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(SketchError::Config(
                "peak_lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(SketchError::Config("grad_clip must be positive".into()));
        }
        self.model_config().validate()
    }
}

/// Hash of the parts of a model config that stage I fixes; stage II may
/// change only the refiner variant and the single-stage flag.
pub fn backbone_hash(config: &ModelConfig) -> String {
    ModelConfig {
        variant: Variant::Offset,
        single_stage: false,
        ..config.clone()
    }
    .hash()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    /// Per-term means over the epoch's batches.
    pub terms: BTreeMap<String, f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }

    pub fn term(&self, name: &str) -> Vec<f64> {
        self.epochs.iter().filter_map(|r| r.terms.get(name).copied()).collect()
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str, stage: Stage, variant: Variant, seed: u64, config_hash: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| SketchError::Parse {
                    record: i,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<EpochRecord>>>()?;
        let wall_seconds = epochs.iter().map(|r| r.seconds).sum();
        Ok(TrainReport {
            stage,
            variant,
            seed,
            config_hash: config_hash.into(),
            epochs,
            wall_seconds,
        })
    }

    /// Compact table: first, middle and last epochs.
    pub fn summary_table(&self) -> String {
        let mut names: Vec<&String> = self.epochs.iter().flat_map(|r| r.terms.keys()).collect();
        names.sort();
        names.dedup();
        let mut out = format!("{:>6} {:>12}", "epoch", "loss");
        for n in &names {
            out += &format!(" {n:>12}");
        }
        out.push('\n');
        let n = self.epochs.len();
        let mut rows: Vec<usize> = vec![0, n / 4, n / 2, 3 * n / 4, n.saturating_sub(1)];
        rows.dedup();
        for &i in rows.iter().filter(|&&i| i < n) {
            let r = &self.epochs[i];
            out += &format!("{:>6} {:>12.5}", r.epoch, r.loss);
            for name in &names {
                out += &format!(" {:>12.5}", r.terms.get(*name).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }
}

/// Drops sketches with fewer than two strokes, which cannot supply both a
/// source and a target.
pub fn usable(data: &[PreparedSketch]) -> Vec<&PreparedSketch> {
    data.iter().filter(|s| s.len() >= 2).collect()
}

fn trainable_ids(model: &SketchMod, stage: Stage) -> Vec<ParamId> {
    match stage.groups() {
        Some(groups) => model.group_ids(groups),
        None => model.params().iter().map(|(id, _)| id).collect(),
    }
}

/// AdamW over exactly the parameters `config.stage` trains.
pub fn stage_optimizer(model: &SketchMod, config: &TrainConfig) -> AdamW {
    AdamW::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        model.params(),
        &trainable_ids(model, config.stage),
    )
}

/// Loss and its named terms for one batch.
pub fn batch_objective(
    model: &SketchMod,
    tape: &mut Tape,
    batch: &SketchBatch,
    stage: Stage,
) -> Result<(sketchmod_tensor::Var, BTreeMap<String, f64>)> {
    let mut terms = BTreeMap::new();
    let mut put = |tape: &Tape, name: &str, v| {
        terms.insert(name.to_string(), tape.value(v).item().unwrap_or(f64::NAN));
    };
    let loss = match stage {
        Stage::Stage1 => {
            let o = model.stage1(tape, batch)?;
            put(tape, "seq", o.sequence);
            put(tape, "image", o.image);
            put(tape, "attr", o.attributes);
            o.loss
        }
        Stage::Stage2 => {
            let o = model.stage2(tape, batch)?;
            put(tape, "embedding", o.embedding);
            put(tape, "attr", o.attributes);
            o.loss
        }
        Stage::SingleStage => {
            let o = model.single_stage(tape, batch)?;
            put(tape, "seq", o.stage1.sequence);
            put(tape, "image", o.stage1.image);
            put(tape, "attr", o.stage1.attributes);
            put(tape, "embedding", o.stage2.embedding);
            put(tape, "refined_attr", o.stage2.attributes);
            o.loss
        }
    };
    Ok((loss, terms))
}

/// Runs `config.stage` on `model` in place. `on_epoch` sees every record
/// as it is produced. On a non-finite loss the parameters are restored to
/// the end of the last finished epoch before the error is returned.
pub fn train(
    model: &mut SketchMod,
    data: &[PreparedSketch],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    let data = usable(data);
    if data.is_empty() {
        return Err(SketchError::DataEmpty);
    }
    let bcfg = model.config().batch_config();
    let mut opt = stage_optimizer(model, config);
    let per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = (per_epoch * config.epochs) as u64;
    let stage_salt = match config.stage {
        Stage::Stage1 => 0x51,
        Stage::Stage2 => 0x52,
        Stage::SingleStage => 0x53,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stage_salt);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let start = Instant::now();
    let mut report = TrainReport {
        stage: config.stage,
        variant: config.variant,
        seed: config.seed,
        config_hash: model.config().hash(),
        epochs: Vec::with_capacity(config.epochs),
        wall_seconds: 0.0,
    };
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        let snapshot = model.params().clone();
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&PreparedSketch> = chunk.iter().map(|&i| data[i]).collect();
            let seeds: Vec<u64> = refs.iter().map(|_| rng.gen()).collect();
            let batch = make_batch_seeded(&refs, &seeds, &bcfg)?;
            let mut tape = Tape::with_trainable(opt.state().keys().copied());
            let (loss, terms) = batch_objective(model, &mut tape, &batch, config.stage)?;
            let value = tape.value(loss).item()?;
            let mut grads = tape.backward(loss)?;
            if !value.is_finite() || !grads.global_norm().is_finite() {
                *model.params_mut() = snapshot;
                return Err(SketchError::NonFiniteLoss { epoch, step: bi });
            }
            if let Some(c) = config.grad_clip {
                grads.clip_global_norm(c);
            }
            lr = cosine_lr(step, total_steps, config.peak_lr);
            opt.step(model.params_mut(), &grads, lr);
            step += 1;
            loss_sum += value;
            for (k, v) in terms {
                *sums.entry(k).or_default() += v;
            }
        }
        let nb = per_epoch as f64;
        let record = EpochRecord {
            stage: config.stage,
            epoch,
            loss: loss_sum / nb,
            terms: sums.into_iter().map(|(k, v)| (k, v / nb)).collect(),
            lr,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        tracing::debug!(epoch, loss = record.loss, "epoch finished");
        on_epoch(&record);
        report.epochs.push(record);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Loads a stage-I checkpoint for stage II, rejecting a backbone that does
/// not match `config`, and switches it to the configured variant.
pub fn load_for_stage2(path: impl AsRef<std::path::Path>, config: &TrainConfig) -> Result<SketchMod> {
    let (stage1, _) = SketchMod::load(path)?;
    let want = config.model_config();
    let (expected, found) = (backbone_hash(&want), backbone_hash(stage1.config()));
    if expected != found {
        return Err(SketchError::CheckpointMismatch { expected, found });
    }
    with_config(&stage1, want)
}

/// A copy of `model` under `config`, which must share its backbone.
/// Parameters the new variant has but `model` lacks keep a fresh init.
pub fn with_config(model: &SketchMod, config: ModelConfig) -> Result<SketchMod> {
    let mut out = SketchMod::new(config, 0)?;
    let backbone = model.group_ids(&STAGE1_GROUPS).len();
    let entries = model.params().named_tensors();
    out.params_mut().load_matching(&entries)?;
    if out.group_ids(&STAGE1_GROUPS).len() != backbone {
        return Err(SketchError::CheckpointMismatch {
            expected: backbone_hash(out.config()),
            found: backbone_hash(model.config()),
        });
    }
    Ok(out)
}

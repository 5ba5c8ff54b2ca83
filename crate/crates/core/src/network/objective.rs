//! Loss terms and the forward passes of both training stages.

use sketchmod_tensor::{Tape, Tensor, Var};

use super::config::Variant;
use super::gmm::{expand_targets, log_likelihood, GmmOutput};
use super::model::{SketchMod, StrokeMask};
use crate::dataio::{SketchBatch, POINT_FEATURES};
use crate::error::{Result, SketchError};

pub const IMAGE_WEIGHT: f64 = 0.2;

/// Mean over valid steps of the mixture NLL of the displacements plus the
/// pen cross-entropy.
pub fn sequence_loss(
    tape: &mut Tape,
    g: &GmmOutput,
    deltas: &Tensor,
    pens: &[usize],
    mask: &StrokeMask,
) -> Result<Var> {
    let shape = tape.shape(g.mu_x).to_vec();
    let (bsz, s, n, m) = (shape[0], shape[1], shape[2], shape[3]);
    if deltas.shape() != [bsz, s, n, 2] || pens.len() != bsz * s * n || mask.valid.len() != bsz * s {
        return Err(SketchError::Config(format!(
            "sequence targets {:?} do not match head output {shape:?}",
            deltas.shape()
        )));
    }
    mask.require_rows()?;
    let (dx, dy) = expand_targets(deltas, m)?;
    let dx = tape.constant(dx);
    let dy = tape.constant(dy);
    let ll = log_likelihood(tape, g, dx, dy)?;

    let mut onehot = vec![0.0; bsz * s * n * 3];
    for (i, &p) in pens.iter().enumerate() {
        onehot[i * 3 + p] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![bsz, s, n, 3], onehot)?);
    let pen_ll = tape.mul(g.log_pen, onehot)?;
    let pen_ll = tape.sum_last(pen_ll)?;

    let steps = mask.valid.iter().filter(|v| **v).count() * n;
    let w = mask.slot_weights(n, -1.0 / steps as f64);
    let w = tape.constant(w);
    let total = tape.add(ll, pen_ll)?;
    let total = tape.mul(total, w)?;
    Ok(tape.sum(total))
}

/// `Σ_k ‖p_k^GT − p_k‖²` over valid slots, averaged over samples.
pub fn attribute_loss(tape: &mut Tape, predicted: Var, gt: &Tensor, mask: &StrokeMask) -> Result<Var> {
    let gt = tape.constant(gt.clone());
    let diff = tape.sub(predicted, gt)?;
    let sq = tape.square(diff);
    let w = tape.constant(mask.slot_weights(5, 1.0 / mask.batch as f64));
    let sq = tape.mul(sq, w)?;
    Ok(tape.sum(sq))
}

/// `‖a − b‖²` per row of `[B, w]`, averaged over rows.
pub fn mean_sq_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let rows = tape.shape(a)[0] as f64;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / rows))
}

#[derive(Debug, Clone, Copy)]
pub struct Stage1Output {
    pub loss: Var,
    pub sequence: Var,
    /// Squared raster error summed over pixels, averaged over the batch.
    pub image: Var,
    pub attributes: Var,
    /// `[B, S, 5]`.
    pub predicted: Var,
    pub gmm: GmmOutput,
    /// `[B, size²]`.
    pub raster: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Stage2Output {
    pub loss: Var,
    pub embedding: Var,
    pub attributes: Var,
    /// `ê` `[B, d]`.
    pub refined: Var,
    /// `p′` `[B, 5]`.
    pub refined_attributes: Var,
    /// Attributes predicted from the corrupted source `[B, 5]`.
    pub corrupted_attributes: Var,
    /// Frozen-encoder embedding of the uncorrupted source `[B, d]`.
    pub target_embedding: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SingleStageOutput {
    pub loss: Var,
    pub stage1: Stage1Output,
    pub stage2: Stage2Output,
}

pub fn batch_mask(batch: &SketchBatch) -> Result<StrokeMask> {
    StrokeMask::new(batch.size, batch.slots, batch.stroke_mask.clone())
}

/// `batch.raw` with each sample's slot 0 replaced by its corrupted source.
pub fn raw_with_corrupted_source(batch: &SketchBatch) -> Tensor {
    let feat = batch.n_points * POINT_FEATURES;
    let mut raw = batch.raw.clone();
    let src = batch.corrupted_source.data();
    for b in 0..batch.size {
        let at = b * batch.slots * feat;
        raw.data_mut()[at..at + feat].copy_from_slice(&src[b * feat..(b + 1) * feat]);
    }
    raw
}

fn slot0(t: &Tensor, slots: usize) -> Result<Tensor> {
    let shape = t.shape();
    let width = shape[2];
    let data = t
        .data()
        .chunks(slots * width)
        .flat_map(|c| c[..width].iter().copied())
        .collect();
    Ok(Tensor::new(vec![shape[0], width], data)?)
}

impl SketchMod {
    fn check_batch(&self, batch: &SketchBatch) -> Result<()> {
        if batch.n_points != self.config().n_points {
            return Err(SketchError::Config(format!(
                "batch has {} points per stroke, model expects {}",
                batch.n_points,
                self.config().n_points
            )));
        }
        Ok(())
    }

    /// Reconstruction objective with the refiner bypassed.
    pub fn stage1(&self, tape: &mut Tape, batch: &SketchBatch) -> Result<Stage1Output> {
        self.check_batch(batch)?;
        let mask = batch_mask(batch)?;
        let norm = tape.constant(batch.normalized.clone());
        let raw = tape.constant(batch.raw.clone());
        let e_bar = self.encode(tape, norm)?;
        let e = self.encode(tape, raw)?;
        let predicted = self.predict(tape, e, e_bar)?;
        let mixed = self.mix(tape, e_bar, predicted, &mask)?;
        let gmm = self.generate_sequence(tape, mixed)?;
        let sequence = sequence_loss(tape, &gmm, &batch.gt_deltas, &batch.gt_pen, &mask)?;
        let raster = self.generate_image(tape, mixed, &mask)?;
        let gt = tape.constant(batch.gt_raster.clone());
        let image = mean_sq_distance(tape, gt, raster)?;
        let attributes = attribute_loss(tape, predicted, &batch.gt_attributes, &mask)?;
        let weighted = tape.scale(image, IMAGE_WEIGHT);
        let loss = tape.add(sequence, weighted)?;
        let loss = tape.add(loss, attributes)?;
        Ok(Stage1Output {
            loss,
            sequence,
            image,
            attributes,
            predicted,
            gmm,
            raster,
        })
    }

    /// Source refinement objective on the batch's corrupted sources.
    pub fn stage2(&self, tape: &mut Tape, batch: &SketchBatch) -> Result<Stage2Output> {
        self.check_batch(batch)?;
        let mask = batch_mask(batch)?;
        let zeros = vec![0; batch.size];
        let norm = tape.constant(batch.normalized.clone());
        let e_bar = self.encode(tape, norm)?;
        let raw = tape.constant(raw_with_corrupted_source(batch));
        let e = self.encode(tape, raw)?;
        let predicted = self.predict(tape, e, e_bar)?;
        let rows = match self.config().variant {
            Variant::Plain => e,
            Variant::Offset | Variant::AttributeOnly => e_bar,
        };
        let refined = {
            let all = self.refine(tape, rows, predicted, &mask)?;
            tape.select_rows(all, &zeros)?
        };
        let e_bar_src = tape.select_rows(e_bar, &zeros)?;
        let refined_attributes = self.predict(tape, refined, e_bar_src)?;
        let corrupted_attributes = tape.select_rows(predicted, &zeros)?;

        let gt_src = tape.constant(slot0(&batch.raw, batch.slots)?);
        let target = self.encode(tape, gt_src)?;
        let target_embedding = tape.detach(target);
        let embedding = mean_sq_distance(tape, target_embedding, refined)?;
        let p_gt = tape.constant(slot0(&batch.gt_attributes, batch.slots)?);
        let attributes = mean_sq_distance(tape, p_gt, refined_attributes)?;
        let loss = tape.add(embedding, attributes)?;
        Ok(Stage2Output {
            loss,
            embedding,
            attributes,
            refined,
            refined_attributes,
            corrupted_attributes,
            target_embedding,
        })
    }

    /// Both objectives on the same batch, summed.
    pub fn single_stage(&self, tape: &mut Tape, batch: &SketchBatch) -> Result<SingleStageOutput> {
        let stage1 = self.stage1(tape, batch)?;
        let stage2 = self.stage2(tape, batch)?;
        let loss = tape.add(stage1.loss, stage2.loss)?;
        Ok(SingleStageOutput { loss, stage1, stage2 })
    }
}

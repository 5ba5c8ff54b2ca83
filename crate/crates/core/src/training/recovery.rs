use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sketchmod_tensor::Tape;

use crate::dataio::{make_batch_seeded, BatchConfig, PreparedSketch, SketchBatch};
use crate::error::{Result, SketchError};
use crate::geometry::StrokeAttributes;
use crate::network::SketchMod;

/// Outcome of refining one corrupted source.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub attributes: StrokeAttributes,
    /// `‖ê − e^GT‖`, when the refiner works in embedding space.
    pub embedding_distance: Option<f64>,
}

/// Anything that maps a batch of corrupted sources to refined attributes.
pub trait SourceRefiner {
    fn refine_batch(&self, batch: &SketchBatch) -> Result<Vec<Refinement>>;
}

impl SourceRefiner for SketchMod {
    fn refine_batch(&self, batch: &SketchBatch) -> Result<Vec<Refinement>> {
        let mut tape = Tape::inference();
        let out = self.stage2(&mut tape, batch)?;
        let p = tape.value(out.refined_attributes).data();
        let e_hat = tape.value(out.refined).data();
        let e_gt = tape.value(out.target_embedding).data();
        let d = self.config().d_model;
        Ok((0..batch.size)
            .map(|b| {
                let dist = e_hat[b * d..(b + 1) * d]
                    .iter()
                    .zip(&e_gt[b * d..(b + 1) * d])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                Refinement {
                    attributes: StrokeAttributes::from_slice(&p[b * 5..(b + 1) * 5]),
                    embedding_distance: Some(dist),
                }
            })
            .collect())
    }
}

/// Test rig returning the uncorrupted source attributes.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthRefiner;

impl SourceRefiner for GroundTruthRefiner {
    fn refine_batch(&self, batch: &SketchBatch) -> Result<Vec<Refinement>> {
        let gt = batch.gt_attributes.data();
        let stride = batch.slots * 5;
        Ok((0..batch.size)
            .map(|b| Refinement {
                attributes: StrokeAttributes::from_slice(&gt[b * stride..b * stride + 5]),
                embedding_distance: Some(0.0),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub trials: usize,
    /// Fraction of trials where `p′` is strictly closer to the ground truth
    /// than the corrupted attributes.
    pub improved_fraction: f64,
    /// Mean `|p′ − p^GT|` per component (angle wrapped).
    pub refined_abs_error: [f64; 5],
    pub corrupted_abs_error: [f64; 5],
    pub median_refined_distance: f64,
    pub median_corrupted_distance: f64,
    pub mean_embedding_distance: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `trials` corruption trials cycling through `data`. Trial `t` uses
/// sketch `t mod len` and a corruption seed drawn from `seed`, so results
/// depend only on the inputs.
pub fn evaluate_recovery(
    refiner: &impl SourceRefiner,
    data: &[PreparedSketch],
    trials: usize,
    seed: u64,
    config: &BatchConfig,
) -> Result<RecoveryMetrics> {
    let data = super::usable(data);
    if data.is_empty() || trials == 0 {
        return Err(SketchError::DataEmpty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..trials).map(|_| rng.gen()).collect();
    let mut refined_err = [0.0; 5];
    let mut corrupted_err = [0.0; 5];
    let (mut refined_d, mut corrupted_d, mut emb) = (vec![], vec![], vec![]);
    let mut improved = 0usize;
    let chunk = 16;
    for start in (0..trials).step_by(chunk) {
        let end = (start + chunk).min(trials);
        let refs: Vec<&PreparedSketch> = (start..end).map(|t| data[t % data.len()]).collect();
        let batch = make_batch_seeded(&refs, &seeds[start..end], config)?;
        let out = refiner.refine_batch(&batch)?;
        let stride = batch.slots * 5;
        for (b, r) in out.iter().enumerate() {
            let gt = StrokeAttributes::from_slice(&batch.gt_attributes.data()[b * stride..b * stride + 5]);
            let pn = StrokeAttributes::from_slice(&batch.corrupted_attributes.data()[b * 5..(b + 1) * 5]);
            let (dr, dc) = (r.attributes.distance(&gt), pn.distance(&gt));
            if dr < dc {
                improved += 1;
            }
            for (acc, v) in refined_err.iter_mut().zip(r.attributes.abs_diff(&gt)) {
                *acc += v;
            }
            for (acc, v) in corrupted_err.iter_mut().zip(pn.abs_diff(&gt)) {
                *acc += v;
            }
            refined_d.push(dr);
            corrupted_d.push(dc);
            if let Some(e) = r.embedding_distance {
                emb.push(e);
            }
        }
    }
    let n = trials as f64;
    Ok(RecoveryMetrics {
        trials,
        improved_fraction: improved as f64 / n,
        refined_abs_error: refined_err.map(|v| v / n),
        corrupted_abs_error: corrupted_err.map(|v| v / n),
        median_refined_distance: median(refined_d),
        median_corrupted_distance: median(corrupted_d),
        mean_embedding_distance: (emb.len() == trials).then(|| emb.iter().sum::<f64>() / n),
    })
}

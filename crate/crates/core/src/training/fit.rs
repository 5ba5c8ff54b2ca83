//! How closely a stage-I model reproduces its training sketches.

use serde::{Deserialize, Serialize};
use sketchmod_tensor::Tape;

use crate::dataio::{make_batch_seeded, PreparedSketch};
use crate::edit::{reconstruct, EditOptions};
use crate::error::{Result, SketchError};
use crate::geometry::{Sketch, StrokeAttributes};
use crate::network::SketchMod;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub sketches: usize,
    /// Mean `|p − p^GT|` of the attribute predictor per component, over
    /// every stroke (angle wrapped).
    pub predictor_mae: [f64; 5],
    /// Per-pixel squared error of `G_img` against the ground-truth raster.
    pub image_mse: f64,
    /// Mean distance between corresponding points of a greedy
    /// reconstruction and the resampled ground truth. A decode that stops
    /// early is padded with its last point.
    pub reconstruction_error: f64,
}

fn point_error(decoded: &Sketch, gt: &PreparedSketch) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (d, g) in decoded.strokes().iter().zip(&gt.strokes) {
        let dp = d.points();
        for (k, p) in g.resampled.points().iter().enumerate() {
            let q = dp[k.min(dp.len() - 1)];
            sum += ((q.x - p.x).powi(2) + (q.y - p.y).powi(2)).sqrt();
            count += 1;
        }
    }
    (sum, count)
}

pub fn fit_metrics(model: &SketchMod, data: &[PreparedSketch]) -> Result<FitMetrics> {
    if data.is_empty() {
        return Err(SketchError::DataEmpty);
    }
    let bcfg = model.config().batch_config();
    let mut mae = [0.0; 5];
    let mut strokes = 0usize;
    let mut sq = 0.0;
    let mut pixels = 0usize;
    for chunk in data.chunks(16) {
        let refs: Vec<&PreparedSketch> = chunk.iter().collect();
        let batch = make_batch_seeded(&refs, &vec![0; refs.len()], &bcfg)?;
        let mut tape = Tape::inference();
        let out = model.stage1(&mut tape, &batch)?;
        let pred = tape.value(out.predicted).data();
        let gt = batch.gt_attributes.data();
        for b in 0..batch.size {
            for s in (0..batch.slots).filter(|&s| batch.slot_valid(b, s)) {
                let at = (b * batch.slots + s) * 5;
                let p = StrokeAttributes::from_slice(&pred[at..at + 5]);
                let g = StrokeAttributes::from_slice(&gt[at..at + 5]);
                for (acc, v) in mae.iter_mut().zip(p.abs_diff(&g)) {
                    *acc += v;
                }
                strokes += 1;
            }
        }
        let raster = tape.value(out.raster).data();
        sq += raster
            .iter()
            .zip(batch.gt_raster.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        pixels += raster.len();
    }

    let opts = EditOptions::default();
    let (mut dist, mut points) = (0.0, 0usize);
    for sketch in data {
        let resampled = Sketch::new(sketch.strokes.iter().map(|s| s.resampled.clone()).collect())?;
        let decoded = reconstruct(model, &resampled, &opts)?.edited;
        let (d, n) = point_error(&decoded, sketch);
        dist += d;
        points += n;
    }

    Ok(FitMetrics {
        sketches: data.len(),
        predictor_mae: mae.map(|v| v / strokes as f64),
        image_mse: sq / pixels as f64,
        reconstruction_error: dist / points as f64,
    })
}

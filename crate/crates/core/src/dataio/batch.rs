//! Per-stroke features and padded training batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sketchmod_tensor::Tensor;

use super::raster::{rasterize, Raster};
use crate::error::{Result, SketchError};
use crate::geometry::{
    denormalize_stroke, normalize_stroke, resample_stroke, CorruptionNoise, NormalizedStroke, Sketch, Stroke,
    StrokeAttributes,
};

/// Values per point in a stroke feature row: `x, y, down, lift, end`.
pub const POINT_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub n_points: usize,
    pub image_size: usize,
    pub k_max: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            n_points: 32,
            image_size: 64,
            k_max: 25,
        }
    }
}

/// A stroke resampled to the model's point count, with its canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedStroke {
    pub resampled: Stroke,
    pub normalized: NormalizedStroke,
    pub attributes: StrokeAttributes,
}

impl PreparedStroke {
    pub fn new(stroke: &Stroke, n_points: usize) -> Result<Self> {
        let resampled = resample_stroke(stroke, n_points)?;
        let (normalized, attributes) = normalize_stroke(&resampled)?;
        Ok(PreparedStroke {
            resampled,
            normalized,
            attributes,
        })
    }

    /// The same shape posed under `p` instead of its own attributes.
    pub fn reposed(&self, p: &StrokeAttributes) -> Stroke {
        denormalize_stroke(&self.normalized, p).expect("prepared strokes are non-empty")
    }
}

/// Flattens a stroke into `[x, y, one-hot pen]` rows.
pub fn stroke_features(s: &Stroke, out: &mut [f64]) {
    for (k, (p, pen)) in s.points().iter().zip(s.pen_states()).enumerate() {
        let row = &mut out[k * POINT_FEATURES..(k + 1) * POINT_FEATURES];
        row[0] = p.x;
        row[1] = p.y;
        row[2..].fill(0.0);
        row[2 + pen.index()] = 1.0;
    }
}

/// Sequence targets: per-step displacement from the previous point
/// (zero at the first step) and pen class.
pub fn sequence_targets(s: &Stroke, deltas: &mut [f64], pens: &mut [usize]) {
    let pts = s.points();
    for k in 0..pts.len() {
        let prev = if k == 0 { pts[0] } else { pts[k - 1] };
        deltas[2 * k] = pts[k].x - prev.x;
        deltas[2 * k + 1] = pts[k].y - prev.y;
        pens[k] = s.pen_states()[k].index();
    }
}

/// A sketch with every stroke prepared and its ground-truth raster.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSketch {
    pub strokes: Vec<PreparedStroke>,
    pub raster: Raster,
}

impl PreparedSketch {
    pub fn new(sketch: &Sketch, config: &BatchConfig) -> Result<Self> {
        sketch.check_limit(config.k_max)?;
        let strokes = sketch
            .strokes()
            .iter()
            .map(|s| PreparedStroke::new(s, config.n_points))
            .collect::<Result<Vec<_>>>()?;
        let resampled = Sketch::new(strokes.iter().map(|p| p.resampled.clone()).collect())?;
        Ok(PreparedSketch {
            raster: rasterize(&resampled, config.image_size),
            strokes,
        })
    }

    pub fn len(&self) -> usize {
        self.strokes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }
}

pub fn prepare_all(sketches: &[Sketch], config: &BatchConfig) -> Result<Vec<PreparedSketch>> {
    sketches.iter().map(|s| PreparedSketch::new(s, config)).collect()
}

/// Source choice and attribute noise for one sample, a pure function of
/// the stroke count and seed.
pub fn sample_corruption(n_strokes: usize, seed: u64) -> (usize, CorruptionNoise) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = rng.gen_range(0..n_strokes);
    (sigma, CorruptionNoise::sample(&mut rng))
}

/// Padded batch. Slot 0 of every sample holds the source stroke; the
/// remaining strokes follow in their original order. Padded slots are
/// zero everywhere and false in `stroke_mask`.
#[derive(Debug, Clone)]
pub struct SketchBatch {
    pub size: usize,
    pub slots: usize,
    pub n_points: usize,
    /// `[B, S, n·5]` canonical strokes.
    pub normalized: Tensor,
    /// `[B, S, n·5]` strokes in canvas coordinates.
    pub raw: Tensor,
    /// `[B, S, 5]` attributes of the uncorrupted strokes.
    pub gt_attributes: Tensor,
    /// `[B·S]`.
    pub stroke_mask: Vec<bool>,
    pub counts: Vec<usize>,
    /// Index of the source stroke within its original sketch.
    pub source_index: Vec<usize>,
    pub noise: Vec<CorruptionNoise>,
    /// `[B, 5]` corrupted source attributes.
    pub corrupted_attributes: Tensor,
    /// `[B, n·5]` the source stroke posed under the corrupted attributes.
    pub corrupted_source: Tensor,
    /// `[B, size·size]`.
    pub gt_raster: Tensor,
    /// `[B, S, n, 2]`.
    pub gt_deltas: Tensor,
    /// `[B·S·n]` pen classes.
    pub gt_pen: Vec<usize>,
}

impl SketchBatch {
    pub fn slot_valid(&self, b: usize, s: usize) -> bool {
        self.stroke_mask[b * self.slots + s]
    }
}

/// Assembles a batch with an explicit corruption seed per sample.
pub fn make_batch_seeded(sketches: &[&PreparedSketch], seeds: &[u64], config: &BatchConfig) -> Result<SketchBatch> {
    if sketches.is_empty() {
        return Err(SketchError::DataEmpty);
    }
    let n = config.n_points;
    let feat = n * POINT_FEATURES;
    let bsz = sketches.len();
    let slots = sketches.iter().map(|s| s.len()).max().unwrap();
    let px = config.image_size * config.image_size;

    let mut normalized = vec![0.0; bsz * slots * feat];
    let mut raw = vec![0.0; bsz * slots * feat];
    let mut attrs = vec![0.0; bsz * slots * 5];
    let mut mask = vec![false; bsz * slots];
    let mut deltas = vec![0.0; bsz * slots * n * 2];
    let mut pens = vec![0usize; bsz * slots * n];
    let mut corrupted_attrs = vec![0.0; bsz * 5];
    let mut corrupted_src = vec![0.0; bsz * feat];
    let mut raster = vec![0.0; bsz * px];
    let (mut counts, mut source_index, mut noise) = (vec![], vec![], vec![]);

    for (b, (sk, &seed)) in sketches.iter().zip(seeds).enumerate() {
        if sk.len() < 2 {
            return Err(SketchError::TooFewStrokes {
                sketch: b,
                found: sk.len(),
            });
        }
        if sk.strokes[0].resampled.len() != n || sk.raster.size != config.image_size {
            return Err(SketchError::Config(
                "sketch prepared with a different batch config".into(),
            ));
        }
        let (sigma, eps) = sample_corruption(sk.len(), seed);
        let order = std::iter::once(sigma).chain((0..sk.len()).filter(|&k| k != sigma));
        for (slot, k) in order.enumerate() {
            let ps = &sk.strokes[k];
            let idx = b * slots + slot;
            stroke_features(&ps.normalized.stroke, &mut normalized[idx * feat..(idx + 1) * feat]);
            stroke_features(&ps.resampled, &mut raw[idx * feat..(idx + 1) * feat]);
            attrs[idx * 5..(idx + 1) * 5].copy_from_slice(&ps.attributes.to_array());
            mask[idx] = true;
            sequence_targets(
                &ps.resampled,
                &mut deltas[idx * n * 2..(idx + 1) * n * 2],
                &mut pens[idx * n..(idx + 1) * n],
            );
        }
        let src = &sk.strokes[sigma];
        let p_n = eps.apply(&src.attributes);
        corrupted_attrs[b * 5..(b + 1) * 5].copy_from_slice(&p_n.to_array());
        stroke_features(&src.reposed(&p_n), &mut corrupted_src[b * feat..(b + 1) * feat]);
        raster[b * px..(b + 1) * px].copy_from_slice(&sk.raster.data);
        counts.push(sk.len());
        source_index.push(sigma);
        noise.push(eps);
    }

    Ok(SketchBatch {
        size: bsz,
        slots,
        n_points: n,
        normalized: Tensor::new(vec![bsz, slots, feat], normalized)?,
        raw: Tensor::new(vec![bsz, slots, feat], raw)?,
        gt_attributes: Tensor::new(vec![bsz, slots, 5], attrs)?,
        stroke_mask: mask,
        counts,
        source_index,
        noise,
        corrupted_attributes: Tensor::new(vec![bsz, 5], corrupted_attrs)?,
        corrupted_source: Tensor::new(vec![bsz, feat], corrupted_src)?,
        gt_raster: Tensor::new(vec![bsz, px], raster)?,
        gt_deltas: Tensor::new(vec![bsz, slots, n, 2], deltas)?,
        gt_pen: pens,
    })
}

/// Draws one corruption seed per sample from `rng` and assembles the batch.
pub fn make_batch<R: Rng + ?Sized>(
    sketches: &[&PreparedSketch],
    config: &BatchConfig,
    rng: &mut R,
) -> Result<SketchBatch> {
    let seeds: Vec<u64> = sketches.iter().map(|_| rng.gen()).collect();
    make_batch_seeded(sketches, &seeds, config)
}

/// Convenience wrapper that prepares raw sketches first.
pub fn make_batch_from_sketches<R: Rng + ?Sized>(
    sketches: &[Sketch],
    config: &BatchConfig,
    rng: &mut R,
) -> Result<SketchBatch> {
    let prepared = prepare_all(sketches, config)?;
    let refs: Vec<&PreparedSketch> = prepared.iter().collect();
    make_batch(&refs, config, rng)
}

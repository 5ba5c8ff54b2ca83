//! Bivariate Gaussian mixture output head and stroke decoding.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sketchmod_tensor::{Tape, Tensor, Var};

use crate::error::{Result, SketchError};
use crate::geometry::{PenState, Point, Stroke};

/// Correlations are `RHO_MAX · tanh(·)` so that `1 − ρ²` stays away from zero.
pub const RHO_MAX: f64 = 0.99;

/// Head outputs, all `[B, S, n, M]` except `log_pen` which is `[B, S, n, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct GmmOutput {
    pub log_pi: Var,
    pub mu_x: Var,
    pub mu_y: Var,
    pub sigma_x: Var,
    pub sigma_y: Var,
    pub rho: Var,
    pub log_pen: Var,
}

/// Splits raw head activations `[B, S, n, 6M + 3]` into mixture parameters.
pub fn gmm_from_raw(tape: &mut Tape, raw: Var, mixtures: usize, std_min: f64) -> Result<GmmOutput> {
    let m = mixtures;
    let logits = tape.narrow(raw, 0, m)?;
    let log_pi = tape.log_softmax(logits)?;
    let mu_x = tape.narrow(raw, m, m)?;
    let mu_y = tape.narrow(raw, 2 * m, m)?;
    let sigma = |tape: &mut Tape, start| -> Result<Var> {
        let s = tape.narrow(raw, start, m)?;
        let s = tape.exp(s);
        Ok(tape.add_scalar(s, std_min))
    };
    let sigma_x = sigma(tape, 3 * m)?;
    let sigma_y = sigma(tape, 4 * m)?;
    let r = tape.narrow(raw, 5 * m, m)?;
    let r = tape.tanh(r);
    let rho = tape.scale(r, RHO_MAX);
    let pen = tape.narrow(raw, 6 * m, 3)?;
    let log_pen = tape.log_softmax(pen)?;
    Ok(GmmOutput {
        log_pi,
        mu_x,
        mu_y,
        sigma_x,
        sigma_y,
        rho,
        log_pen,
    })
}

/// `log Σ_m π_m N(dx, dy | μ_m, σ_m, ρ_m)` per step. `dx` and `dy` have the
/// mixture shape (targets repeated across components).
pub fn log_likelihood(tape: &mut Tape, g: &GmmOutput, dx: Var, dy: Var) -> Result<Var> {
    let zx = tape.sub(dx, g.mu_x)?;
    let zx = tape.div(zx, g.sigma_x)?;
    let zy = tape.sub(dy, g.mu_y)?;
    let zy = tape.div(zy, g.sigma_y)?;
    let zx2 = tape.square(zx);
    let zy2 = tape.square(zy);
    let cross = tape.mul(zx, zy)?;
    let cross = tape.mul(cross, g.rho)?;
    let cross = tape.scale(cross, 2.0);
    let z = tape.add(zx2, zy2)?;
    let z = tape.sub(z, cross)?;
    let rho2 = tape.square(g.rho);
    let one_minus = tape.scale(rho2, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let quad = tape.div(z, one_minus)?;
    let quad = tape.scale(quad, -0.5);
    let log_sx = tape.log(g.sigma_x);
    let log_sy = tape.log(g.sigma_y);
    let log_om = tape.log(one_minus);
    let log_om = tape.scale(log_om, 0.5);
    let norm = tape.add(log_sx, log_sy)?;
    let norm = tape.add(norm, log_om)?;
    let norm = tape.add_scalar(norm, (2.0 * PI).ln());
    let log_n = tape.sub(quad, norm)?;
    let joint = tape.add(log_n, g.log_pi)?;
    Ok(tape.logsumexp(joint)?)
}

/// Greedy decoding or temperature sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

impl Decoding {
    /// `None` selects greedy decoding.
    pub fn from_temperature(temperature: Option<f64>, seed: u64) -> Result<Self> {
        match temperature {
            None => Ok(Decoding::Greedy),
            Some(t) if t > 0.0 && t.is_finite() => Ok(Decoding::Sample { temperature: t, seed }),
            Some(t) => Err(SketchError::InvalidTemperature(t)),
        }
    }
}

/// Head outputs copied off the tape.
#[derive(Debug, Clone)]
pub struct GmmValues {
    pub batch: usize,
    pub slots: usize,
    pub steps: usize,
    pub mixtures: usize,
    pub log_pi: Vec<f64>,
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub rho: Vec<f64>,
    pub log_pen: Vec<f64>,
}

impl GmmValues {
    pub fn from_tape(tape: &Tape, g: &GmmOutput) -> Self {
        let shape = tape.shape(g.mu_x);
        let take = |v: Var| tape.value(v).data().to_vec();
        GmmValues {
            batch: shape[0],
            slots: shape[1],
            steps: shape[2],
            mixtures: shape[3],
            log_pi: take(g.log_pi),
            mu_x: take(g.mu_x),
            mu_y: take(g.mu_y),
            sigma_x: take(g.sigma_x),
            sigma_y: take(g.sigma_y),
            rho: take(g.rho),
            log_pen: take(g.log_pen),
        }
    }

    fn step(&self, b: usize, s: usize, t: usize) -> usize {
        (b * self.slots + s) * self.steps + t
    }

    /// Displacement and pen class for one step.
    fn draw(&self, at: usize, mode: Decoding, rng: &mut ChaCha8Rng) -> (f64, f64, usize) {
        let m = self.mixtures;
        let comp = at * m..(at + 1) * m;
        let pen = &self.log_pen[at * 3..(at + 1) * 3];
        match mode {
            Decoding::Greedy => {
                let k = argmax(&self.log_pi[comp.clone()]) + comp.start;
                (self.mu_x[k], self.mu_y[k], argmax(pen))
            }
            Decoding::Sample { temperature, .. } => {
                let k = sample_logits(&self.log_pi[comp.clone()], temperature, rng) + comp.start;
                let scale = temperature.sqrt();
                let (z1, z2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                let (sx, sy, r) = (self.sigma_x[k] * scale, self.sigma_y[k] * scale, self.rho[k]);
                let dx = self.mu_x[k] + sx * z1;
                let dy = self.mu_y[k] + sy * (r * z1 + (1.0 - r * r).sqrt() * z2);
                (dx, dy, sample_logits(pen, temperature, rng))
            }
        }
    }

    /// Decodes slot `s` of sample `b` into a stroke beginning at `start`.
    /// The stroke ends at the first step after the first whose pen class is
    /// not "down", or at the last step.
    pub fn decode_slot(
        &self,
        b: usize,
        s: usize,
        start: Point,
        mode: Decoding,
        rng: &mut ChaCha8Rng,
    ) -> Result<Stroke> {
        let mut pts = Vec::with_capacity(self.steps);
        let mut cur = start;
        for t in 0..self.steps {
            let (dx, dy, pen) = self.draw(self.step(b, s, t), mode, rng);
            cur = Point::new(cur.x + dx, cur.y + dy);
            pts.push(cur);
            if t >= 1 && pen != PenState::Down.index() {
                break;
            }
        }
        let mut pen = vec![PenState::Down; pts.len()];
        *pen.last_mut().unwrap() = PenState::Lift;
        Stroke::new(pts, pen)
    }

    /// Every valid slot of sample `b`, each started at its entry in `starts`.
    pub fn decode_sample(&self, b: usize, starts: &[Point], mode: Decoding) -> Result<Vec<Stroke>> {
        let seed = match mode {
            Decoding::Greedy => 0,
            Decoding::Sample { seed, .. } => seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        starts
            .iter()
            .enumerate()
            .map(|(s, &p)| self.decode_slot(b, s, p, mode, &mut rng))
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_logits(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, x) in w.iter().enumerate() {
        if u < *x {
            return i;
        }
        u -= x;
    }
    w.len() - 1
}

/// Repeats `[B, S, n, 2]` targets across `m` components as two `[B, S, n, m]` tensors.
pub fn expand_targets(deltas: &Tensor, m: usize) -> Result<(Tensor, Tensor)> {
    let shape = deltas.shape();
    let steps = deltas.numel() / 2;
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.push(m);
    let d = deltas.data();
    let xs = (0..steps).flat_map(|i| std::iter::repeat_n(d[2 * i], m)).collect();
    let ys = (0..steps).flat_map(|i| std::iter::repeat_n(d[2 * i + 1], m)).collect();
    Ok((Tensor::new(out_shape.clone(), xs)?, Tensor::new(out_shape, ys)?))
}

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;

/// AdamW hyper-parameters. Defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8, decay 0.01.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW with decoupled weight decay. Holds state only for the parameters it
/// was constructed with; everything else is left untouched by `step`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<ParamId, Moments>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore, trainable: &[ParamId]) -> Self {
        let state = trainable
            .iter()
            .map(|&id| {
                let n = store.get(id).tensor.numel();
                (
                    id,
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        Self {
            config,
            state,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state(&self) -> &BTreeMap<ParamId, Moments> {
        &self.state
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (&id, moments) in self.state.iter_mut() {
            let grad = grads.param(id).map(|g| g.data());
            let w = store.tensor_mut(id).data_mut();
            for i in 0..w.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                w[i] -= lr * weight_decay * w[i];
                moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * g;
                moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
                let m_hat = moments.m[i] / bc1;
                let v_hat = moments.v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Cosine annealing from `peak_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, peak_lr: f64) -> f64 {
    if total_steps == 0 {
        return peak_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    peak_lr * 0.5 * (1.0 + (PI * frac).cos())
}

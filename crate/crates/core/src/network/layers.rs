//! Parameter bundles and their forward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sketchmod_tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Ok(self.store.add(name, Tensor::new(shape.to_vec(), data)?)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::full(shape, value))?)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            w: self.uniform(&format!("{name}.w"), &[fan_in, fan_out], bound)?,
            b: Some(self.uniform(&format!("{name}.b"), &[fan_out], bound)?),
        })
    }

    /// Like [`Init::linear`] but with every bias entry set to `bias`.
    pub fn linear_biased(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: f64) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            w: self.uniform(&format!("{name}.w"), &[fan_in, fan_out], bound)?,
            b: Some(self.constant(&format!("{name}.b"), &[fan_out], bias)?),
        })
    }

    /// Square projection without bias.
    pub fn matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            w: self.uniform(name, &[fan_in, fan_out], bound)?,
            b: None,
        })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.constant(&format!("{name}.g"), &[d], 1.0)?,
            bias: self.constant(&format!("{name}.b"), &[d], 0.0)?,
        })
    }

    /// Linear layers through `sizes` with GeLU between them.
    pub fn mlp(&mut self, name: &str, sizes: &[usize]) -> Result<Mlp> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.linear(&format!("{name}.l{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        Ok(tape.linear(x, w, b)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let n = tape.layer_norm(x, eps)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul(n, g)?;
        Ok(tape.add(y, b)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, store, x)?;
            if i < last {
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Predictor {
    pub l0: Linear,
    pub ln0: LayerNorm,
    pub l1: Linear,
    pub ln1: LayerNorm,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct RefinerLayer {
    pub w_q: Linear,
    pub w_ke: Linear,
    /// Offset variant only.
    pub w_kr: Option<Linear>,
    pub w_v: Linear,
    pub out: Linear,
    pub ln: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
pub(crate) struct Refiner {
    /// Content and position biases, offset variant only.
    pub u: Option<ParamId>,
    pub v: Option<ParamId>,
    /// Attribute-only variant only.
    pub attr_proj: Option<Linear>,
    pub layers: Vec<RefinerLayer>,
}

#[derive(Debug, Clone)]
pub(crate) struct MixerLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct Mixer {
    pub attr_proj: Linear,
    pub layers: Vec<MixerLayer>,
}

#[derive(Debug, Clone)]
pub(crate) struct ImageDecoder {
    pub mlp: Mlp,
    pub convs: Vec<Linear>,
    pub channels: Vec<usize>,
}

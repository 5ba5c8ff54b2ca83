use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchmod_tensor::{ParamId, ParamStore, Tape, Tensor, Var};

use super::config::{ModelConfig, Variant};
use super::gmm::{gmm_from_raw, GmmOutput};
use super::layers::{ImageDecoder, Init, Mixer, MixerLayer, Mlp, Predictor, Refiner, RefinerLayer};
use crate::dataio::POINT_FEATURES;
use crate::error::{Result, SketchError};

/// Name prefixes of the seven parameter groups.
pub const ENCODER: &str = "encoder.";
pub const PREDICTOR: &str = "predictor.";
pub const OFFSET: &str = "offset.";
pub const REFINER: &str = "refiner.";
pub const MIXER: &str = "mixer.";
pub const GSEQ: &str = "gseq.";
pub const GIMG: &str = "gimg.";

/// Initial output bias of the image decoder: most of a sketch raster is
/// blank, and starting near that prior keeps the sigmoid out of saturation.
pub const INK_PRIOR_LOGIT: f64 = -3.0;

pub const STAGE1_GROUPS: [&str; 5] = [ENCODER, PREDICTOR, MIXER, GSEQ, GIMG];
pub const STAGE2_GROUPS: [&str; 2] = [OFFSET, REFINER];

fn no_part(part: &str, variant: Variant) -> SketchError {
    SketchError::Config(format!("the {variant:?} refiner variant has no {part}"))
}

/// Which slots of a padded `[B, S]` layout hold strokes.
#[derive(Debug, Clone, PartialEq)]
pub struct StrokeMask {
    pub batch: usize,
    pub slots: usize,
    pub valid: Vec<bool>,
}

impl StrokeMask {
    pub fn new(batch: usize, slots: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * slots {
            return Err(SketchError::Config(format!(
                "mask has {} entries for a {batch}×{slots} layout",
                valid.len()
            )));
        }
        Ok(StrokeMask { batch, slots, valid })
    }

    pub fn full(batch: usize, slots: usize) -> Self {
        StrokeMask {
            batch,
            slots,
            valid: vec![true; batch * slots],
        }
    }

    pub fn is_valid(&self, b: usize, s: usize) -> bool {
        self.valid[b * self.slots + s]
    }

    pub fn count(&self, b: usize) -> usize {
        (0..self.slots).filter(|&s| self.is_valid(b, s)).count()
    }

    /// `[B, heads, S, S]`, true where the key slot is padding.
    pub fn key_mask(&self, heads: usize) -> Vec<bool> {
        let s = self.slots;
        let mut out = Vec::with_capacity(self.batch * heads * s * s);
        for b in 0..self.batch {
            for _ in 0..heads * s {
                out.extend((0..s).map(|j| !self.is_valid(b, j)));
            }
        }
        out
    }

    pub fn require_rows(&self) -> Result<()> {
        match (0..self.batch).find(|&b| self.count(b) == 0) {
            Some(b) => Err(SketchError::MaskAllFalse(b)),
            None => Ok(()),
        }
    }

    /// A source in slot 0 and at least one target per sample.
    pub fn require_targets(&self) -> Result<()> {
        match (0..self.batch).find(|&b| !self.is_valid(b, 0) || self.count(b) < 2) {
            Some(b) => Err(SketchError::MaskAllFalse(b)),
            None => Ok(()),
        }
    }

    /// `[B, S, width]` filled with `value` on valid slots, zero elsewhere.
    pub fn slot_weights(&self, width: usize, value: f64) -> Tensor {
        let data = self
            .valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(if v { value } else { 0.0 }, width))
            .collect();
        Tensor::new(vec![self.batch, self.slots, width], data).expect("shape matches")
    }
}

/// The full model: encoder, attribute predictor, offset embedder, refiner,
/// mixer and the two generators.
#[derive(Debug, Clone)]
pub struct SketchMod {
    config: ModelConfig,
    params: ParamStore,
    encoder: Mlp,
    predictor: Predictor,
    offset: Option<Mlp>,
    refiner: Refiner,
    mixer: Mixer,
    gseq: Mlp,
    gimg: ImageDecoder,
}

impl SketchMod {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = &config;
        let d = c.d_model;
        let feat = c.n_points * POINT_FEATURES;

        let encoder = init.mlp("encoder", &[feat, c.encoder_hidden, c.encoder_hidden, d])?;
        let ph = c.predictor_hidden;
        let predictor = Predictor {
            l0: init.linear("predictor.l0", 2 * d, ph)?,
            ln0: init.layer_norm("predictor.ln0", ph)?,
            l1: init.linear("predictor.l1", ph, ph)?,
            ln1: init.layer_norm("predictor.ln1", ph)?,
            l2: init.linear("predictor.l2", ph, 5)?,
        };
        let rel = c.variant == Variant::Offset;
        let offset = rel.then(|| init.mlp("offset", &[5, c.offset_hidden, d])).transpose()?;

        let small = 0.02;
        let refiner = Refiner {
            u: rel.then(|| init.uniform("refiner.u", &[d], small)).transpose()?,
            v: rel.then(|| init.uniform("refiner.v", &[d], small)).transpose()?,
            attr_proj: (c.variant == Variant::AttributeOnly)
                .then(|| init.linear("refiner.attr_proj", 5, d))
                .transpose()?,
            layers: (0..c.n_refiner_layers)
                .map(|t| {
                    let p = format!("refiner.layer{t}");
                    Ok(RefinerLayer {
                        w_q: init.matrix(&format!("{p}.w_q"), d, d)?,
                        w_ke: init.matrix(&format!("{p}.w_ke"), d, d)?,
                        w_kr: rel.then(|| init.matrix(&format!("{p}.w_kr"), d, d)).transpose()?,
                        w_v: init.matrix(&format!("{p}.w_v"), d, d)?,
                        out: init.linear(&format!("{p}.out"), d, d)?,
                        ln: init.layer_norm(&format!("{p}.ln"), d)?,
                        ffn: init.mlp(&format!("{p}.ffn"), &[d, c.ffn_mult * d, d])?,
                    })
                })
                .collect::<Result<_>>()?,
        };

        let mixer = Mixer {
            attr_proj: init.linear("mixer.attr_proj", 5, d)?,
            layers: (0..c.n_mixer_layers)
                .map(|t| {
                    let p = format!("mixer.layer{t}");
                    Ok(MixerLayer {
                        q: init.linear(&format!("{p}.q"), d, d)?,
                        k: init.linear(&format!("{p}.k"), d, d)?,
                        v: init.linear(&format!("{p}.v"), d, d)?,
                        o: init.linear(&format!("{p}.o"), d, d)?,
                        ln1: init.layer_norm(&format!("{p}.ln1"), d)?,
                        ffn: init.mlp(&format!("{p}.ffn"), &[d, c.ffn_mult * d, d])?,
                        ln2: init.layer_norm(&format!("{p}.ln2"), d)?,
                    })
                })
                .collect::<Result<_>>()?,
        };

        let gseq = init.mlp("gseq", &[d, c.seq_hidden, c.n_points * c.step_params()])?;

        let base = c.image_size / 8;
        let ch = vec![c.img_channels, c.img_channels / 2, c.img_channels / 4, 1];
        let gimg = ImageDecoder {
            mlp: init.mlp("gimg", &[d, c.img_hidden, base * base * ch[0]])?,
            convs: (0..3)
                .map(|i| match i {
                    2 => init.linear_biased(&format!("gimg.conv{i}"), 9 * ch[i], ch[i + 1], INK_PRIOR_LOGIT),
                    _ => init.linear(&format!("gimg.conv{i}"), 9 * ch[i], ch[i + 1]),
                })
                .collect::<Result<_>>()?,
            channels: ch,
        };

        Ok(SketchMod {
            config,
            params: store,
            encoder,
            predictor,
            offset,
            refiner,
            mixer,
            gseq,
            gimg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    pub fn group_ids(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.params.ids_with_prefix(prefixes)
    }

    /// SHA-256 of every parameter.
    pub fn content_hash(&self) -> String {
        self.params.content_hash(None)
    }

    // ---- components -----------------------------------------------------

    /// Stroke encoder `f`: `[.., n·5] -> [.., d]`.
    pub fn encode(&self, tape: &mut Tape, strokes: Var) -> Result<Var> {
        let want = self.config.n_points * POINT_FEATURES;
        let shape = tape.shape(strokes);
        if shape.last() != Some(&want) {
            return Err(SketchError::Config(format!(
                "stroke features have width {:?}, expected {want}",
                shape.last()
            )));
        }
        self.encoder.forward(tape, &self.params, strokes)
    }

    /// Attribute predictor `F(CAT(e; ē))`: `[.., d] × [.., d] -> [.., 5]`.
    pub fn predict(&self, tape: &mut Tape, e: Var, e_bar: Var) -> Result<Var> {
        let p = &self.predictor;
        let eps = self.config.ln_eps;
        let x = tape.concat(&[e, e_bar])?;
        let x = p.l0.forward(tape, &self.params, x)?;
        let x = p.ln0.forward(tape, &self.params, x, eps)?;
        let x = tape.gelu(x);
        let x = p.l1.forward(tape, &self.params, x)?;
        let x = p.ln1.forward(tape, &self.params, x, eps)?;
        let x = tape.gelu(x);
        p.l2.forward(tape, &self.params, x)
    }

    /// Offset embedder `h`: `[.., 5] -> [.., d]`. Only the offset variant
    /// has one.
    pub fn embed_offset(&self, tape: &mut Tape, delta: Var) -> Result<Var> {
        let h = self
            .offset
            .as_ref()
            .ok_or_else(|| no_part("offset embedder", self.config.variant))?;
        h.forward(tape, &self.params, delta)
    }

    /// `R[b, i, j] = h(p[b, i] − p[b, j])` for attributes `[B, S, 5]`.
    pub fn offsets(&self, tape: &mut Tape, attrs: Var) -> Result<Var> {
        let diff = tape.pairwise_diff(attrs)?;
        self.embed_offset(tape, diff)
    }

    /// Attention weights `[B, S, S]` and aggregated messages `H` `[B, S, d]`
    /// of refiner layer `layer`. Without `r` only the content term is scored
    /// and `H = α V`.
    pub fn refiner_attention(
        &self,
        tape: &mut Tape,
        layer: usize,
        x: Var,
        r: Option<Var>,
        mask: &StrokeMask,
    ) -> Result<(Var, Var)> {
        let l = &self.refiner.layers[layer];
        let (bsz, s, d) = (mask.batch, mask.slots, self.config.d_model);
        let ps = &self.params;
        let q = l.w_q.forward(tape, ps, x)?;
        let ke = l.w_ke.forward(tape, ps, x)?;
        let v = l.w_v.forward(tape, ps, x)?;
        let scores = match r {
            Some(r) => {
                let (Some(u), Some(vv), Some(w_kr)) = (self.refiner.u, self.refiner.v, l.w_kr.as_ref()) else {
                    return Err(no_part("relative attention", self.config.variant));
                };
                let u = tape.param(ps, u);
                let vv = tape.param(ps, vv);
                let kr = w_kr.forward(tape, ps, r)?;
                let qu = tape.add(q, u)?;
                let content = tape.matmul_nt(qu, ke)?;
                let qv = tape.add(q, vv)?;
                let qv = tape.reshape(qv, &[bsz * s, 1, d])?;
                let kr = tape.reshape(kr, &[bsz * s, s, d])?;
                let rel = tape.matmul_nt(qv, kr)?;
                let rel = tape.reshape(rel, &[bsz, s, s])?;
                tape.add(content, rel)?
            }
            None => tape.matmul_nt(q, ke)?,
        };
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let scores = tape.masked_fill(scores, &mask.key_mask(1), f64::NEG_INFINITY)?;
        let alpha = tape.softmax(scores)?;
        let mut h = tape.matmul(alpha, v)?;
        if let Some(r) = r {
            let a = tape.reshape(alpha, &[bsz * s, 1, s])?;
            let r = tape.reshape(r, &[bsz * s, s, d])?;
            let hr = tape.matmul(a, r)?;
            let hr = tape.reshape(hr, &[bsz, s, d])?;
            h = tape.add(h, hr)?;
        }
        Ok((alpha, h))
    }

    /// One refiner layer: attention, `LN(Linear(H) + x)`, then the FFN.
    pub fn refiner_layer(
        &self,
        tape: &mut Tape,
        layer: usize,
        x: Var,
        r: Option<Var>,
        mask: &StrokeMask,
    ) -> Result<Var> {
        let (_, h) = self.refiner_attention(tape, layer, x, r, mask)?;
        let l = &self.refiner.layers[layer];
        let y = l.out.forward(tape, &self.params, h)?;
        let y = tape.add(y, x)?;
        let phi = l.ln.forward(tape, &self.params, y, self.config.ln_eps)?;
        l.ffn.forward(tape, &self.params, phi)
    }

    /// Runs the refiner stack over rows `x` `[B, S, d]` with slot 0 as the
    /// source. `attrs` `[B, S, 5]` feed the offsets (or, for the
    /// attribute-only variant, are added to the rows). Returns every row.
    pub fn refine(&self, tape: &mut Tape, x: Var, attrs: Var, mask: &StrokeMask) -> Result<Var> {
        mask.require_targets()?;
        let (mut x, r) = match self.config.variant {
            Variant::Offset => (x, Some(self.offsets(tape, attrs)?)),
            Variant::AttributeOnly => {
                let proj = self
                    .refiner
                    .attr_proj
                    .as_ref()
                    .ok_or_else(|| no_part("attribute projection", self.config.variant))?;
                let pa = proj.forward(tape, &self.params, attrs)?;
                (tape.add(x, pa)?, None)
            }
            Variant::Plain => (x, None),
        };
        for t in 0..self.config.n_refiner_layers {
            x = self.refiner_layer(tape, t, x, r, mask)?;
        }
        Ok(x)
    }

    /// Refined source embedding `ê` `[B, d]`. `e_bar` holds normalized
    /// embeddings with the source in slot 0; `attrs` are the attributes the
    /// offsets are built from. Nothing else enters the computation.
    pub fn refine_source(&self, tape: &mut Tape, e_bar: Var, attrs: Var, mask: &StrokeMask) -> Result<Var> {
        let rows = self.refine(tape, e_bar, attrs, mask)?;
        Ok(tape.select_rows(rows, &vec![0; mask.batch])?)
    }

    /// Mixer `ξ` over `ē + W_p p`; also returns each layer's attention
    /// weights `[B, heads, S, S]`.
    pub fn mix_traced(&self, tape: &mut Tape, e_bar: Var, attrs: Var, mask: &StrokeMask) -> Result<(Var, Vec<Var>)> {
        mask.require_rows()?;
        let ps = &self.params;
        let (bsz, s, d) = (mask.batch, mask.slots, self.config.d_model);
        let heads = self.config.n_mixer_heads;
        let dh = d / heads;
        let key = mask.key_mask(heads);
        let pa = self.mixer.attr_proj.forward(tape, ps, attrs)?;
        let mut x = tape.add(e_bar, pa)?;
        let mut weights = Vec::new();
        for l in &self.mixer.layers {
            let split = |tape: &mut Tape, lin: &super::layers::Linear| -> Result<Var> {
                let y = lin.forward(tape, ps, x)?;
                let y = tape.reshape(y, &[bsz, s, heads, dh])?;
                Ok(tape.swap_axes12(y)?)
            };
            let q = split(tape, &l.q)?;
            let k = split(tape, &l.k)?;
            let v = split(tape, &l.v)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = tape.masked_fill(scores, &key, f64::NEG_INFINITY)?;
            let alpha = tape.softmax(scores)?;
            weights.push(alpha);
            let ctx = tape.matmul(alpha, v)?;
            let ctx = tape.swap_axes12(ctx)?;
            let ctx = tape.reshape(ctx, &[bsz, s, d])?;
            let o = l.o.forward(tape, ps, ctx)?;
            let y = tape.add(x, o)?;
            let x1 = l.ln1.forward(tape, ps, y, self.config.ln_eps)?;
            let f = l.ffn.forward(tape, ps, x1)?;
            let y = tape.add(x1, f)?;
            x = l.ln2.forward(tape, ps, y, self.config.ln_eps)?;
        }
        Ok((x, weights))
    }

    pub fn mix(&self, tape: &mut Tape, e_bar: Var, attrs: Var, mask: &StrokeMask) -> Result<Var> {
        Ok(self.mix_traced(tape, e_bar, attrs, mask)?.0)
    }

    /// Sequence generator: per slot, `n` steps of mixture parameters.
    pub fn generate_sequence(&self, tape: &mut Tape, mixed: Var) -> Result<GmmOutput> {
        let shape = tape.shape(mixed).to_vec();
        let raw = self.gseq.forward(tape, &self.params, mixed)?;
        let raw = tape.reshape(
            raw,
            &[shape[0], shape[1], self.config.n_points, self.config.step_params()],
        )?;
        gmm_from_raw(tape, raw, self.config.n_mixtures, self.config.std_min)
    }

    /// Image generator: `[B, size²]` intensities in `[0, 1]`.
    pub fn generate_image(&self, tape: &mut Tape, mixed: Var, mask: &StrokeMask) -> Result<Var> {
        mask.require_rows()?;
        let (bsz, s) = (mask.batch, mask.slots);
        let mut pool = vec![0.0; bsz * s];
        for b in 0..bsz {
            let w = 1.0 / mask.count(b) as f64;
            for j in 0..s {
                if mask.is_valid(b, j) {
                    pool[b * s + j] = w;
                }
            }
        }
        let pool = tape.constant(Tensor::new(vec![bsz, 1, s], pool)?);
        let pooled = tape.matmul(pool, mixed)?;
        let pooled = tape.reshape(pooled, &[bsz, self.config.d_model])?;
        let g = &self.gimg;
        let base = self.config.image_size / 8;
        let h = g.mlp.forward(tape, &self.params, pooled)?;
        let h = tape.reshape(h, &[bsz, base, base, g.channels[0]])?;
        let mut h = tape.gelu(h);
        for (i, conv) in g.convs.iter().enumerate() {
            let up = tape.upsample2(h)?;
            let cols = tape.im2col3(up)?;
            h = conv.forward(tape, &self.params, cols)?;
            if i + 1 < g.convs.len() {
                h = tape.gelu(h);
            }
        }
        let img = tape.sigmoid(h);
        let px = self.config.image_size * self.config.image_size;
        Ok(tape.reshape(img, &[bsz, px])?)
    }
}

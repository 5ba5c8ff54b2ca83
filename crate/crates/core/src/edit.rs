//! Stroke expansion, replacement, attribute manipulation and reconstruction.
//!
//! Every operation has two outputs. `edited` is regenerated through the
//! sequence decoder, so target strokes come back as the model draws them.
//! `geometry` keeps the target strokes verbatim and re-poses only the
//! addressed strokes; it is what an editor needs for lossless previews.

use serde::{Deserialize, Serialize};
use sketchmod_tensor::{Tape, Tensor, Var};

use crate::dataio::batch::{stroke_features, PreparedStroke, POINT_FEATURES};
use crate::dataio::svg::{export_svg_with, SvgOptions};
use crate::dataio::{rasterize, Raster};
use crate::error::{Result, SketchError};
use crate::geometry::{apply_attributes, normalize_stroke, Point, Sketch, Stroke, StrokeAttributes};
use crate::network::{Decoding, GmmValues, SketchMod, StrokeMask, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Expand,
    Replace,
    Manipulate,
    Reconstruct,
}

/// New values for some attributes of stroke `index`; absent fields keep
/// their current value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeOverride {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_tau1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_tau2: Option<f64>,
}

impl AttributeOverride {
    fn fields(&self) -> [Option<f64>; 5] {
        [self.a, self.b, self.theta, self.log_tau1, self.log_tau2]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().flatten().all(|v| v.is_finite())
    }

    pub fn apply(&self, p: &StrokeAttributes) -> StrokeAttributes {
        let mut v = p.to_array();
        for (slot, new) in v.iter_mut().zip(self.fields()) {
            if let Some(x) = new {
                *slot = x;
            }
        }
        StrokeAttributes::from_array(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditOptions {
    pub decoding: Decoding,
    /// Return the composited sketch as `edited` and skip decoding.
    pub geometry_only: bool,
}

impl Default for EditOptions {
    fn default() -> Self {
        EditOptions {
            decoding: Decoding::Greedy,
            geometry_only: false,
        }
    }
}

/// One edit as received over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub mode: EditMode,
    pub target: Sketch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Stroke>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replace_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attribute_overrides: Vec<AttributeOverride>,
    /// Absent means greedy decoding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_temperature: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub geometry_only: bool,
}

impl EditRequest {
    pub fn reconstruct(target: Sketch) -> Self {
        EditRequest {
            mode: EditMode::Reconstruct,
            target,
            source: None,
            replace_index: None,
            attribute_overrides: Vec::new(),
            decode_temperature: None,
            seed: 0,
            geometry_only: false,
        }
    }

    pub fn options(&self) -> Result<EditOptions> {
        Ok(EditOptions {
            decoding: Decoding::from_temperature(self.decode_temperature, self.seed)?,
            geometry_only: self.geometry_only,
        })
    }

    fn source(&self) -> Result<&Stroke> {
        self.source
            .as_ref()
            .ok_or_else(|| SketchError::Config(format!("mode {:?} needs a source stroke", self.mode)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub mode: EditMode,
    pub edited: Sketch,
    /// `p′_σ` for expansion and replacement.
    pub refined_attributes: Option<StrokeAttributes>,
    /// Attributes each stroke of `edited` was generated from.
    pub attributes: Vec<StrokeAttributes>,
    /// Position of the source stroke in `edited`.
    pub source_index: Option<usize>,
    /// Target strokes kept verbatim with only the addressed strokes re-posed.
    /// Absent for reconstruction.
    pub geometry: Option<Sketch>,
    pub raster: Raster,
}

impl EditResult {
    pub fn svg(&self) -> String {
        let opts = SvgOptions {
            highlight: self.source_index,
            ..SvgOptions::default()
        };
        export_svg_with(&self.edited, &opts)
    }
}

/// Runs `request` against `model`.
pub fn run_edit(model: &SketchMod, request: &EditRequest) -> Result<EditResult> {
    let opts = request.options()?;
    match request.mode {
        EditMode::Expand => expand_stroke(model, &request.target, request.source()?, &opts),
        EditMode::Replace => {
            let index = request
                .replace_index
                .ok_or_else(|| SketchError::Config("mode Replace needs replace_index".into()))?;
            replace_stroke(model, &request.target, index, request.source()?, &opts)
        }
        EditMode::Manipulate => manipulate_attributes(model, &request.target, &request.attribute_overrides, &opts),
        EditMode::Reconstruct => reconstruct(model, &request.target, &opts),
    }
}

/// Stroke features for one sample, in slot order.
struct Encoded {
    mask: StrokeMask,
    e_bar: Var,
    e: Var,
    predicted: Var,
}

fn encode_strokes(model: &SketchMod, tape: &mut Tape, strokes: &[&Stroke]) -> Result<Encoded> {
    let cfg = model.config();
    let (n, s) = (cfg.n_points, strokes.len());
    let feat = n * POINT_FEATURES;
    let mut normalized = vec![0.0; s * feat];
    let mut raw = vec![0.0; s * feat];
    for (k, stroke) in strokes.iter().enumerate() {
        let ps = PreparedStroke::new(stroke, n)?;
        stroke_features(&ps.normalized.stroke, &mut normalized[k * feat..(k + 1) * feat]);
        stroke_features(&ps.resampled, &mut raw[k * feat..(k + 1) * feat]);
    }
    let norm = tape.constant(Tensor::new(vec![1, s, feat], normalized)?);
    let raw = tape.constant(Tensor::new(vec![1, s, feat], raw)?);
    let e_bar = model.encode(tape, norm)?;
    let e = model.encode(tape, raw)?;
    let predicted = model.predict(tape, e, e_bar)?;
    Ok(Encoded {
        mask: StrokeMask::full(1, s),
        e_bar,
        e,
        predicted,
    })
}

fn attributes_of(tape: &Tape, v: Var) -> Vec<StrokeAttributes> {
    tape.value(v)
        .data()
        .chunks(5)
        .map(StrokeAttributes::from_slice)
        .collect()
}

/// Mixes `ē + p` with the given attributes and decodes one stroke per slot,
/// each starting at its attribute start point.
fn generate(
    model: &SketchMod,
    tape: &mut Tape,
    enc: &Encoded,
    attrs: &[StrokeAttributes],
    decoding: Decoding,
) -> Result<Vec<Stroke>> {
    let flat = attrs.iter().flat_map(|p| p.to_array()).collect();
    let p = tape.constant(Tensor::new(vec![1, attrs.len(), 5], flat)?);
    let mixed = model.mix(tape, enc.e_bar, p, &enc.mask)?;
    let gmm = model.generate_sequence(tape, mixed)?;
    let starts: Vec<Point> = attrs.iter().map(|p| Point::new(p.a, p.b)).collect();
    GmmValues::from_tape(tape, &gmm).decode_sample(0, &starts, decoding)
}

fn finish(
    model: &SketchMod,
    mode: EditMode,
    edited: Sketch,
    refined: Option<StrokeAttributes>,
    attributes: Vec<StrokeAttributes>,
    source_index: Option<usize>,
    geometry: Option<Sketch>,
) -> EditResult {
    EditResult {
        mode,
        raster: rasterize(&edited, model.config().image_size),
        edited,
        refined_attributes: refined,
        attributes,
        source_index,
        geometry,
    }
}

/// Refines `source` against `others` and places it at `at` among them.
fn transplant(
    model: &SketchMod,
    mode: EditMode,
    others: &[Stroke],
    source: &Stroke,
    at: usize,
    opts: &EditOptions,
) -> Result<EditResult> {
    if others.is_empty() {
        return Err(SketchError::EmptyTarget);
    }
    let k_max = model.config().k_max;
    if others.len() + 1 > k_max {
        return Err(SketchError::TooManyStrokes {
            found: others.len() + 1,
            limit: k_max,
        });
    }
    let mut tape = Tape::inference();
    let slots: Vec<&Stroke> = std::iter::once(source).chain(others).collect();
    let enc = encode_strokes(model, &mut tape, &slots)?;
    let rows = match model.config().variant {
        Variant::Plain => enc.e,
        Variant::Offset | Variant::AttributeOnly => enc.e_bar,
    };
    let all = model.refine(&mut tape, rows, enc.predicted, &enc.mask)?;
    let refined = tape.select_rows(all, &[0])?;
    let e_bar_src = tape.select_rows(enc.e_bar, &[0])?;
    let p_refined = model.predict(&mut tape, refined, e_bar_src)?;
    let p_refined = attributes_of(&tape, p_refined)[0];

    let mut attrs = attributes_of(&tape, enc.predicted);
    attrs[0] = p_refined;

    let mut geometry = others.to_vec();
    geometry.insert(at, apply_attributes(source, &p_refined)?);
    let geometry = Sketch::new(geometry)?;

    // Slot order is [source, others..]; output order puts the source at `at`.
    let mut order_attrs = attrs[1..].to_vec();
    order_attrs.insert(at, attrs[0]);
    let edited = if opts.geometry_only {
        geometry.clone()
    } else {
        let mut strokes = generate(model, &mut tape, &enc, &attrs, opts.decoding)?;
        let src = strokes.remove(0);
        strokes.insert(at, src);
        Sketch::new(strokes)?
    };
    Ok(finish(
        model,
        mode,
        edited,
        Some(p_refined),
        order_attrs,
        Some(at),
        Some(geometry),
    ))
}

/// Adds `source` to `target`; the result has the source as its last stroke.
pub fn expand_stroke(model: &SketchMod, target: &Sketch, source: &Stroke, opts: &EditOptions) -> Result<EditResult> {
    transplant(model, EditMode::Expand, target.strokes(), source, target.len(), opts)
}

/// Swaps stroke `index` of `target` for `source`, refined against the
/// remaining strokes.
pub fn replace_stroke(
    model: &SketchMod,
    target: &Sketch,
    index: usize,
    source: &Stroke,
    opts: &EditOptions,
) -> Result<EditResult> {
    if index >= target.len() {
        return Err(SketchError::IndexOutOfRange {
            index,
            len: target.len(),
        });
    }
    let mut rest = target.strokes().to_vec();
    rest.remove(index);
    transplant(model, EditMode::Replace, &rest, source, index, opts)
}

fn check_overrides(sketch: &Sketch, overrides: &[AttributeOverride]) -> Result<()> {
    for o in overrides {
        if o.index >= sketch.len() {
            return Err(SketchError::IndexOutOfRange {
                index: o.index,
                len: sketch.len(),
            });
        }
        if !o.is_finite() {
            return Err(SketchError::NonFiniteOverride(o.index));
        }
    }
    Ok(())
}

/// Re-poses the addressed strokes of `sketch` without the network. Strokes
/// no override mentions are copied unchanged.
pub fn apply_overrides(sketch: &Sketch, overrides: &[AttributeOverride]) -> Result<Sketch> {
    check_overrides(sketch, overrides)?;
    let mut strokes = sketch.strokes().to_vec();
    for o in overrides {
        let (_, p) = normalize_stroke(&strokes[o.index])?;
        strokes[o.index] = apply_attributes(&strokes[o.index], &o.apply(&p))?;
    }
    Sketch::new(strokes)
}

/// Regenerates `sketch` with some stroke attributes overridden before mixing.
pub fn manipulate_attributes(
    model: &SketchMod,
    sketch: &Sketch,
    overrides: &[AttributeOverride],
    opts: &EditOptions,
) -> Result<EditResult> {
    let geometry = apply_overrides(sketch, overrides)?;
    if opts.geometry_only {
        let attrs = geometry
            .strokes()
            .iter()
            .map(|s| normalize_stroke(s).map(|(_, p)| p))
            .collect::<Result<Vec<_>>>()?;
        return Ok(finish(
            model,
            EditMode::Manipulate,
            geometry.clone(),
            None,
            attrs,
            None,
            Some(geometry),
        ));
    }
    let mut result = regenerate(model, sketch, overrides, opts.decoding)?;
    result.mode = EditMode::Manipulate;
    result.geometry = Some(geometry);
    Ok(result)
}

/// Encodes and regenerates `sketch` with the refiner bypassed.
pub fn reconstruct(model: &SketchMod, sketch: &Sketch, opts: &EditOptions) -> Result<EditResult> {
    regenerate(model, sketch, &[], opts.decoding)
}

fn regenerate(
    model: &SketchMod,
    sketch: &Sketch,
    overrides: &[AttributeOverride],
    decoding: Decoding,
) -> Result<EditResult> {
    check_overrides(sketch, overrides)?;
    sketch.check_limit(model.config().k_max)?;
    let mut tape = Tape::inference();
    let slots: Vec<&Stroke> = sketch.strokes().iter().collect();
    let enc = encode_strokes(model, &mut tape, &slots)?;
    let mut attrs = attributes_of(&tape, enc.predicted);
    for o in overrides {
        attrs[o.index] = o.apply(&attrs[o.index]);
    }
    let strokes = generate(model, &mut tape, &enc, &attrs, decoding)?;
    let edited = Sketch::new(strokes)?;
    Ok(finish(model, EditMode::Reconstruct, edited, None, attrs, None, None))
}

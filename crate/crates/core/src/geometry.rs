//! Stroke geometry: attribute extraction, normalization and its inverse,
//! offset algebra, corruption and resampling.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SketchError};

/// Smallest extent a stroke may have along either axis after rotation.
pub const SCALE_EPS: f64 = 1e-6;

/// Distance under which the geometric center is treated as the start point.
const CENTER_EPS: f64 = 1e-12;

/// Version tag written into every serialized sketch.
pub const SKETCH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenState {
    Down,
    Lift,
    End,
}

impl PenState {
    /// Position in the one-hot pen vector `[down, lift, end]`.
    pub fn index(self) -> usize {
        match self {
            PenState::Down => 0,
            PenState::Lift => 1,
            PenState::End => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(PenState::Down),
            1 => Some(PenState::Lift),
            2 => Some(PenState::End),
            _ => None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStroke {
    points: Vec<Point>,
    pen: Vec<PenState>,
}

/// An ordered run of points with one pen state per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStroke")]
pub struct Stroke {
    points: Vec<Point>,
    pen: Vec<PenState>,
}

impl TryFrom<RawStroke> for Stroke {
    type Error = SketchError;

    fn try_from(raw: RawStroke) -> Result<Self> {
        Stroke::new(raw.points, raw.pen)
    }
}

impl Stroke {
    pub fn new(points: Vec<Point>, pen: Vec<PenState>) -> Result<Self> {
        if points.is_empty() {
            return Err(SketchError::EmptyStroke);
        }
        if points.len() != pen.len() {
            return Err(SketchError::InvalidStroke(format!(
                "{} points but {} pen states",
                points.len(),
                pen.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(SketchError::NonFinite(i));
        }
        let last = pen.len() - 1;
        if let Some(i) = pen[..last].iter().position(|&s| s == PenState::End) {
            return Err(SketchError::InvalidStroke(format!(
                "end state at point {i} is not the final point"
            )));
        }
        Ok(Stroke { points, pen })
    }

    /// Pen down on every point and lifted after the last.
    pub fn from_points(points: Vec<Point>) -> Result<Self> {
        let mut pen = vec![PenState::Down; points.len()];
        if let Some(last) = pen.last_mut() {
            *last = PenState::Lift;
        }
        Stroke::new(points, pen)
    }

    pub fn from_xy(xy: &[(f64, f64)]) -> Result<Self> {
        Stroke::from_points(xy.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn pen_states(&self) -> &[PenState] {
        &self.pen
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> Point {
        self.points[0]
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let (sx, sy) = self.points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(&w[1])).sum()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Stroke {
        self.map_points(|p| Point::new(p.x + dx, p.y + dy))
    }

    /// Applies `f` to every point, keeping pen states.
    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Stroke {
        Stroke {
            points: self.points.iter().map(|&p| f(p)).collect(),
            pen: self.pen.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSketch {
    version: u32,
    strokes: Vec<Stroke>,
}

/// An ordered, non-empty set of strokes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSketch", into = "RawSketchOut")]
pub struct Sketch {
    strokes: Vec<Stroke>,
}

#[derive(Serialize)]
struct RawSketchOut {
    version: u32,
    strokes: Vec<Stroke>,
}

impl From<Sketch> for RawSketchOut {
    fn from(s: Sketch) -> Self {
        RawSketchOut {
            version: SKETCH_FORMAT_VERSION,
            strokes: s.strokes,
        }
    }
}

impl TryFrom<RawSketch> for Sketch {
    type Error = SketchError;

    fn try_from(raw: RawSketch) -> Result<Self> {
        if raw.version != SKETCH_FORMAT_VERSION {
            return Err(SketchError::UnsupportedFormat(format!(
                "sketch version {} (expected {SKETCH_FORMAT_VERSION})",
                raw.version
            )));
        }
        Sketch::new(raw.strokes)
    }
}

impl Sketch {
    pub fn new(strokes: Vec<Stroke>) -> Result<Self> {
        if strokes.is_empty() {
            return Err(SketchError::EmptySketch);
        }
        Ok(Sketch { strokes })
    }

    /// Rejects sketches with more than `k_max` strokes.
    pub fn check_limit(&self, k_max: usize) -> Result<()> {
        if self.strokes.len() > k_max {
            return Err(SketchError::TooManyStrokes {
                found: self.strokes.len(),
                limit: k_max,
            });
        }
        Ok(())
    }

    pub fn strokes(&self) -> &[Stroke] {
        &self.strokes
    }

    pub fn into_strokes(self) -> Vec<Stroke> {
        self.strokes
    }

    pub fn len(&self) -> usize {
        self.strokes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.strokes.iter().flat_map(|s| s.points.iter())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Sketch {
        Sketch {
            strokes: self.strokes.iter().map(|s| s.translated(dx, dy)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("sketch serialization cannot fail")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// `[a, b, θ, log τ₁, log τ₂]`: start point, orientation and log extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokeAttributes {
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub log_tau: [f64; 2],
}

impl StrokeAttributes {
    pub const ZERO: StrokeAttributes = StrokeAttributes {
        a: 0.0,
        b: 0.0,
        theta: 0.0,
        log_tau: [0.0, 0.0],
    };

    pub fn to_array(&self) -> [f64; 5] {
        [self.a, self.b, self.theta, self.log_tau[0], self.log_tau[1]]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        StrokeAttributes {
            a: v[0],
            b: v[1],
            theta: v[2],
            log_tau: [v[3], v[4]],
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        StrokeAttributes::from_array([v[0], v[1], v[2], v[3], v[4]])
    }

    pub fn tau(&self) -> [f64; 2] {
        [self.log_tau[0].exp(), self.log_tau[1].exp()]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Euclidean distance in attribute space with the angle difference
    /// wrapped into (−π, π].
    pub fn distance(&self, other: &StrokeAttributes) -> f64 {
        self.abs_diff(other).iter().map(|d| d * d).sum::<f64>().sqrt()
    }

    /// Per-component absolute differences, angle wrapped.
    pub fn abs_diff(&self, other: &StrokeAttributes) -> [f64; 5] {
        let (p, q) = (self.to_array(), other.to_array());
        let mut d = [0.0; 5];
        for i in 0..5 {
            d[i] = (p[i] - q[i]).abs();
        }
        d[2] = wrap_angle(p[2] - q[2]).abs();
        d
    }
}

/// Directed relative pose `p_i − p_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetAttributes {
    pub delta: [f64; 5],
}

/// A stroke re-posed to the canonical frame: start at the origin side,
/// start→center along +x, and min-max scaled into [0,1]².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedStroke {
    pub stroke: Stroke,
}

/// Maps any angle into (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

fn check_finite(s: &Stroke) -> Result<()> {
    if s.points.is_empty() {
        return Err(SketchError::EmptyStroke);
    }
    match s.points.iter().position(|p| !p.is_finite()) {
        Some(i) => Err(SketchError::NonFinite(i)),
        None => Ok(()),
    }
}

pub fn normalize_stroke(s: &Stroke) -> Result<(NormalizedStroke, StrokeAttributes)> {
    normalize_stroke_with(s, SCALE_EPS)
}

pub fn normalize_stroke_with(s: &Stroke, eps: f64) -> Result<(NormalizedStroke, StrokeAttributes)> {
    check_finite(s)?;
    let start = s.start();
    let center = s.centroid();
    let (cx, cy) = (center.x - start.x, center.y - start.y);
    let theta = if cx.hypot(cy) <= CENTER_EPS {
        0.0
    } else {
        let t = cy.atan2(cx);
        if t == -PI {
            PI
        } else {
            t
        }
    };
    let (sin, cos) = theta.sin_cos();
    let rotated: Vec<(f64, f64)> = s
        .points
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - start.x, p.y - start.y);
            (cos * dx + sin * dy, -sin * dx + cos * dy)
        })
        .collect();
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &rotated {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let tau = [(max_x - min_x).max(eps), (max_y - min_y).max(eps)];
    let points = rotated
        .iter()
        .map(|&(x, y)| Point::new((x - min_x) / tau[0], (y - min_y) / tau[1]))
        .collect();
    let attrs = StrokeAttributes {
        a: start.x,
        b: start.y,
        theta,
        log_tau: [tau[0].ln(), tau[1].ln()],
    };
    let stroke = Stroke {
        points,
        pen: s.pen.clone(),
    };
    Ok((NormalizedStroke { stroke }, attrs))
}

pub fn denormalize_stroke(ns: &NormalizedStroke, p: &StrokeAttributes) -> Result<Stroke> {
    let s = &ns.stroke;
    if s.points.is_empty() {
        return Err(SketchError::EmptyStroke);
    }
    let q0 = s.points[0];
    let tau = p.tau();
    let (sin, cos) = p.theta.sin_cos();
    Ok(s.map_points(|q| {
        let vx = (q.x - q0.x) * tau[0];
        let vy = (q.y - q0.y) * tau[1];
        Point::new(cos * vx - sin * vy + p.a, sin * vx + cos * vy + p.b)
    }))
}

pub fn offset_between(p_i: &StrokeAttributes, p_j: &StrokeAttributes) -> OffsetAttributes {
    let (a, b) = (p_i.to_array(), p_j.to_array());
    let mut delta = [0.0; 5];
    for k in 0..5 {
        delta[k] = a[k] - b[k];
    }
    OffsetAttributes { delta }
}

/// One draw of the attribute noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionNoise {
    pub da: f64,
    pub db: f64,
    pub dtheta: f64,
    pub tau_factor: [f64; 2],
}

impl CorruptionNoise {
    pub const POSITION_RANGE: (f64, f64) = (-1.0, 1.0);
    pub const ANGLE_RANGE: (f64, f64) = (-PI / 2.0, PI / 2.0);
    pub const SCALE_RANGE: (f64, f64) = (0.3, 2.2);

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let (p0, p1) = Self::POSITION_RANGE;
        let (t0, t1) = Self::ANGLE_RANGE;
        let (s0, s1) = Self::SCALE_RANGE;
        CorruptionNoise {
            da: rng.gen_range(p0..p1),
            db: rng.gen_range(p0..p1),
            dtheta: rng.gen_range(t0..t1),
            tau_factor: [rng.gen_range(s0..s1), rng.gen_range(s0..s1)],
        }
    }

    /// The noise at the midpoint of every range.
    pub fn midpoint() -> Self {
        CorruptionNoise {
            da: 0.0,
            db: 0.0,
            dtheta: 0.0,
            tau_factor: [1.25, 1.25],
        }
    }

    pub fn apply(&self, p: &StrokeAttributes) -> StrokeAttributes {
        StrokeAttributes {
            a: p.a + self.da,
            b: p.b + self.db,
            theta: wrap_angle(p.theta + self.dtheta),
            log_tau: [
                p.log_tau[0] + self.tau_factor[0].ln(),
                p.log_tau[1] + self.tau_factor[1].ln(),
            ],
        }
    }
}

pub fn corrupt_attributes<R: Rng + ?Sized>(p: &StrokeAttributes, rng: &mut R) -> StrokeAttributes {
    CorruptionNoise::sample(rng).apply(p)
}

/// Arc-length-uniform resampling to exactly `n` points.
pub fn resample_stroke(s: &Stroke, n: usize) -> Result<Stroke> {
    check_finite(s)?;
    if n < 2 {
        return Err(SketchError::InvalidStroke(format!("cannot resample to {n} points")));
    }
    let pts = &s.points;
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(0.0);
    for w in pts.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + w[0].dist(&w[1]));
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(n);
    if total == 0.0 {
        out.resize(n, pts[0]);
    } else {
        let mut seg = 0;
        for i in 0..n {
            if i == n - 1 {
                out.push(*pts.last().unwrap());
                break;
            }
            let target = total * i as f64 / (n - 1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < target {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let t = if len > 0.0 {
                ((target - cum[seg]) / len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (p, q) = (pts[seg], pts[seg + 1]);
            out.push(Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)));
        }
    }
    Stroke::from_points(out)
}

/// Re-poses `s` under new attributes, keeping its normalized shape.
pub fn apply_attributes(s: &Stroke, p_new: &StrokeAttributes) -> Result<Stroke> {
    let (ns, _) = normalize_stroke(s)?;
    denormalize_stroke(&ns, p_new)
}

/// Scales uniformly and centers so the sketch's bounding box fits [−1,1]².
pub fn canvas_normalize(sketch: &Sketch) -> Sketch {
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in sketch.points() {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    let span = (max_x - min_x).max(max_y - min_y);
    let scale = if span > 0.0 { 2.0 / span } else { 1.0 };
    Sketch {
        strokes: sketch
            .strokes
            .iter()
            .map(|s| {
                s.map_points(|p| {
                    Point::new(
                        ((p.x - cx) * scale).clamp(-1.0, 1.0),
                        ((p.y - cy) * scale).clamp(-1.0, 1.0),
                    )
                })
            })
            .collect(),
    }
}

//! QuickDraw readers: stroke-3 and "drawing" NDJSON records and the packed
//! binary format.

use std::io::Read;
use std::path::Path;

use serde_json::Value;

use crate::error::{Result, SketchError};
use crate::geometry::{canvas_normalize, PenState, Point, Sketch, Stroke};

/// Outcome of a load, including what was dropped or cut.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub sketches: Vec<Sketch>,
    pub skipped_empty: usize,
    pub truncated: usize,
}

/// One `(dx, dy, pen)` row; `pen` applies after the point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub pen: PenState,
}

impl Delta {
    pub fn new(dx: f64, dy: f64, pen: PenState) -> Self {
        Delta { dx, dy, pen }
    }
}

/// Sums deltas into absolute points and splits at every lift or end.
/// Returns `None` for a record with no points.
pub fn strokes_from_deltas(deltas: &[Delta]) -> Result<Option<Sketch>> {
    let (mut x, mut y) = (0.0, 0.0);
    let mut strokes = Vec::new();
    let (mut pts, mut pen) = (Vec::new(), Vec::new());
    for d in deltas {
        x += d.dx;
        y += d.dy;
        pts.push(Point::new(x, y));
        pen.push(d.pen);
        if d.pen != PenState::Down {
            strokes.push(Stroke::new(std::mem::take(&mut pts), std::mem::take(&mut pen))?);
            if d.pen == PenState::End {
                break;
            }
        }
    }
    if !pts.is_empty() {
        *pen.last_mut().unwrap() = PenState::Lift;
        strokes.push(Stroke::new(pts, pen)?);
    }
    if strokes.is_empty() {
        return Ok(None);
    }
    Ok(Some(Sketch::new(strokes)?))
}

/// Inverse of [`strokes_from_deltas`] for a sketch in absolute coordinates.
pub fn to_deltas(sketch: &Sketch) -> Vec<Delta> {
    let (mut px, mut py) = (0.0, 0.0);
    let mut out = Vec::new();
    for s in sketch.strokes() {
        for (p, &pen) in s.points().iter().zip(s.pen_states()) {
            out.push(Delta::new(p.x - px, p.y - py, pen));
            (px, py) = (p.x, p.y);
        }
    }
    out
}

fn pen_from_value(v: &Value) -> Option<PenState> {
    match v {
        Value::Number(n) => match n.as_f64()? as i64 {
            0 => Some(PenState::Down),
            1 => Some(PenState::Lift),
            2 => Some(PenState::End),
            _ => None,
        },
        Value::String(s) => match s.as_str() {
            "down" => Some(PenState::Down),
            "lift" => Some(PenState::Lift),
            "end" => Some(PenState::End),
            _ => None,
        },
        _ => None,
    }
}

fn parse_stroke3(rows: &[Value]) -> std::result::Result<Vec<Delta>, String> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let r = row
                .as_array()
                .filter(|r| r.len() == 3)
                .ok_or(format!("row {i} is not [dx, dy, pen]"))?;
            let dx = r[0].as_f64().ok_or(format!("row {i}: dx is not a number"))?;
            let dy = r[1].as_f64().ok_or(format!("row {i}: dy is not a number"))?;
            let pen = pen_from_value(&r[2]).ok_or(format!("row {i}: bad pen value"))?;
            Ok(Delta::new(dx, dy, pen))
        })
        .collect()
}

/// `{"drawing": [[[x..], [y..]], ..]}` with absolute coordinates per stroke.
fn parse_drawing(strokes: &[Value]) -> std::result::Result<Vec<Stroke>, String> {
    let mut out = Vec::new();
    for (i, s) in strokes.iter().enumerate() {
        let axes = s
            .as_array()
            .filter(|a| a.len() >= 2)
            .ok_or(format!("stroke {i} is not [xs, ys]"))?;
        let nums = |v: &Value| -> std::result::Result<Vec<f64>, String> {
            v.as_array()
                .ok_or(format!("stroke {i}: axis is not an array"))?
                .iter()
                .map(|n| n.as_f64().ok_or(format!("stroke {i}: non-numeric coordinate")))
                .collect()
        };
        let (xs, ys) = (nums(&axes[0])?, nums(&axes[1])?);
        if xs.len() != ys.len() {
            return Err(format!("stroke {i}: {} xs but {} ys", xs.len(), ys.len()));
        }
        if xs.is_empty() {
            continue;
        }
        let pts = xs.iter().zip(&ys).map(|(&x, &y)| Point::new(x, y)).collect();
        out.push(Stroke::from_points(pts).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

/// Parses one NDJSON record into a raw (un-normalized) sketch.
pub fn parse_record(line: &str, record: usize) -> Result<Option<Sketch>> {
    let err = |msg: String| SketchError::Parse { record, msg };
    let v: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    let rows = match &v {
        Value::Array(rows) => Some(rows),
        Value::Object(o) => match (o.get("strokes"), o.get("drawing")) {
            (Some(Value::Array(rows)), _) => Some(rows),
            (_, Some(Value::Array(strokes))) => {
                let strokes = parse_drawing(strokes).map_err(err)?;
                return Ok(if strokes.is_empty() {
                    None
                } else {
                    Some(Sketch::new(strokes)?)
                });
            }
            _ => None,
        },
        _ => None,
    };
    let rows = rows.ok_or_else(|| err("expected a stroke-3 array or a drawing record".into()))?;
    let deltas = parse_stroke3(rows).map_err(err)?;
    strokes_from_deltas(&deltas)
}

fn finish(raw: Vec<Option<Sketch>>, k_max: usize) -> LoadReport {
    let mut report = LoadReport::default();
    for s in raw {
        let Some(s) = s else {
            report.skipped_empty += 1;
            continue;
        };
        let mut strokes = s.into_strokes();
        if strokes.len() > k_max {
            strokes.truncate(k_max);
            report.truncated += 1;
        }
        let sketch = Sketch::new(strokes).expect("non-empty after truncation");
        report.sketches.push(canvas_normalize(&sketch));
    }
    if report.skipped_empty > 0 {
        tracing::warn!(skipped = report.skipped_empty, "skipped empty sketches");
    }
    report
}

pub fn parse_ndjson(text: &str, k_max: usize) -> Result<LoadReport> {
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        raw.push(parse_record(line, i)?);
    }
    Ok(finish(raw, k_max))
}

/// Google's packed drawing format: per record a u64 key, 2-byte country
/// code, u8 recognized flag, u32 timestamp, u16 stroke count, then per
/// stroke a u16 point count followed by x and y byte arrays.
pub fn parse_binary(bytes: &[u8], k_max: usize) -> Result<LoadReport> {
    let mut raw = Vec::new();
    let mut pos = 0usize;
    let mut record = 0usize;
    let take = |pos: &mut usize, n: usize, record: usize| -> Result<std::ops::Range<usize>> {
        if *pos + n > bytes.len() {
            return Err(SketchError::Parse {
                record,
                msg: "truncated record".into(),
            });
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };
    while pos < bytes.len() {
        take(&mut pos, 8 + 2 + 1 + 4, record)?;
        let r = take(&mut pos, 2, record)?;
        let n_strokes = u16::from_le_bytes([bytes[r.start], bytes[r.start + 1]]) as usize;
        let mut strokes = Vec::with_capacity(n_strokes);
        for _ in 0..n_strokes {
            let r = take(&mut pos, 2, record)?;
            let n = u16::from_le_bytes([bytes[r.start], bytes[r.start + 1]]) as usize;
            let xs = take(&mut pos, n, record)?;
            let ys = take(&mut pos, n, record)?;
            if n == 0 {
                continue;
            }
            let pts = bytes[xs]
                .iter()
                .zip(&bytes[ys])
                .map(|(&x, &y)| Point::new(x as f64, y as f64))
                .collect();
            strokes.push(Stroke::from_points(pts)?);
        }
        raw.push(if strokes.is_empty() {
            None
        } else {
            Some(Sketch::new(strokes)?)
        });
        record += 1;
    }
    Ok(finish(raw, k_max))
}

/// Loads a file, picking the reader from its extension.
pub fn load_quickdraw(path: impl AsRef<Path>, k_max: usize) -> Result<LoadReport> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    match ext.as_str() {
        "bin" => parse_binary(&bytes, k_max),
        "ndjson" | "jsonl" | "json" => {
            let text = String::from_utf8(bytes).map_err(|e| SketchError::Parse {
                record: 0,
                msg: e.to_string(),
            })?;
            parse_ndjson(&text, k_max)
        }
        other => Err(SketchError::UnsupportedFormat(format!(
            "QuickDraw file extension {other:?}"
        ))),
    }
}

//! SVG 1.1 export and a reader for the subset this module writes.

use std::fmt::Write;

use crate::error::{Result, SketchError};
use crate::geometry::{PenState, Point, Sketch, Stroke};

#[derive(Debug, Clone, PartialEq)]
pub struct SvgOptions {
    /// Rendered width and height in user units.
    pub pixels: u32,
    pub stroke_width: f64,
    pub color: String,
    /// Stroke to draw in `highlight_color` instead of `color`.
    pub highlight: Option<usize>,
    pub highlight_color: String,
}

impl Default for SvgOptions {
    fn default() -> Self {
        SvgOptions {
            pixels: 256,
            stroke_width: 0.02,
            color: "black".into(),
            highlight: None,
            highlight_color: "red".into(),
        }
    }
}

fn pen_char(p: PenState) -> char {
    match p {
        PenState::Down => 'd',
        PenState::Lift => 'l',
        PenState::End => 'e',
    }
}

pub fn export_svg(sketch: &Sketch) -> String {
    export_svg_with(sketch, &SvgOptions::default())
}

pub fn export_svg_with(sketch: &Sketch, opts: &SvgOptions) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="-1 -1 2 2" width="{0}" height="{0}">"#,
        opts.pixels
    );
    for (i, s) in sketch.strokes().iter().enumerate() {
        let color = if opts.highlight == Some(i) {
            &opts.highlight_color
        } else {
            &opts.color
        };
        let mut d = String::new();
        for (k, p) in s.points().iter().enumerate() {
            let cmd = if k == 0 { 'M' } else { 'L' };
            let _ = write!(d, "{}{cmd} {:.7} {:.7}", if k == 0 { "" } else { " " }, p.x, p.y);
        }
        let pen: String = s.pen_states().iter().map(|&p| pen_char(p)).collect();
        let _ = writeln!(
            out,
            r#"  <path id="stroke-{i}" data-pen="{pen}" d="{d}" fill="none" stroke="{color}" stroke-width="{}" stroke-linecap="round" stroke-linejoin="round"/>"#,
            opts.stroke_width
        );
    }
    out.push_str("</svg>\n");
    out
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let key = format!(" {name}=\"");
    let start = tag.find(&key)? + key.len();
    let end = tag[start..].find('"')? + start;
    Some(&tag[start..end])
}

fn parse_path_data(d: &str) -> Result<Vec<Point>> {
    let bad = |msg: String| SketchError::Parse { record: 0, msg };
    let mut pts = Vec::new();
    let mut tokens = d
        .split(|c: char| c.is_whitespace() || c == ',')
        .flat_map(|t| {
            // Split a leading command letter glued to a number, e.g. "M0.5".
            match t.chars().next() {
                Some(c) if c.is_ascii_alphabetic() && t.len() > 1 => vec![&t[..1], &t[1..]],
                _ => vec![t],
            }
        })
        .filter(|t| !t.is_empty())
        .peekable();
    while let Some(t) = tokens.next() {
        let t = if t == "M" || t == "L" {
            tokens.next().ok_or_else(|| bad("command without coordinates".into()))?
        } else if t.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
            return Err(bad(format!("unsupported path command {t:?}")));
        } else {
            t
        };
        let x: f64 = t.parse().map_err(|_| bad(format!("bad number {t:?}")))?;
        let y_tok = tokens.next().ok_or_else(|| bad("missing y coordinate".into()))?;
        let y: f64 = y_tok.parse().map_err(|_| bad(format!("bad number {y_tok:?}")))?;
        pts.push(Point::new(x, y));
    }
    Ok(pts)
}

/// Reads back the `<path>` elements written by [`export_svg`]. Absolute
/// `M`/`L` commands only; pen states come from `data-pen` when present.
pub fn import_svg(text: &str) -> Result<Sketch> {
    let mut strokes = Vec::new();
    let mut rest = text;
    while let Some(i) = rest.find("<path") {
        let tail = &rest[i..];
        let end = tail.find('>').ok_or(SketchError::Parse {
            record: strokes.len(),
            msg: "unterminated path element".into(),
        })?;
        let tag = &tail[..end];
        let d = attr(tag, "d").ok_or(SketchError::Parse {
            record: strokes.len(),
            msg: "path without d attribute".into(),
        })?;
        let pts = parse_path_data(d)?;
        let stroke = match attr(tag, "data-pen") {
            Some(pen) => {
                let pen = pen
                    .chars()
                    .map(|c| match c {
                        'd' => Ok(PenState::Down),
                        'l' => Ok(PenState::Lift),
                        'e' => Ok(PenState::End),
                        other => Err(SketchError::Parse {
                            record: strokes.len(),
                            msg: format!("bad pen code {other:?}"),
                        }),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Stroke::new(pts, pen)?
            }
            None => Stroke::from_points(pts)?,
        };
        strokes.push(stroke);
        rest = &tail[end..];
    }
    Sketch::new(strokes)
}

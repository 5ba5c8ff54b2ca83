//! Anti-aliased polyline rendering on a square grid.

use std::io::Write;

use crate::error::Result;
use crate::geometry::{Point, Sketch};

/// Grayscale image, row-major, values in [0, 1]; 1 is ink.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn blank(size: usize) -> Self {
        Raster {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.0).count()
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.size as u32, self.size as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| crate::SketchError::Io(e.to_string()))?;
            w.write_image_data(&self.to_bytes())
                .map_err(|e| crate::SketchError::Io(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_png()?)?;
        Ok(())
    }
}

fn to_pixel(p: &Point, size: usize) -> (f64, f64) {
    let s = size as f64;
    ((p.x + 1.0) / 2.0 * s, (p.y + 1.0) / 2.0 * s)
}

fn segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
    (px - ax - t * dx).hypot(py - ay - t * dy)
}

/// Draws every non-degenerate segment with intensity `max(0, 1 − d)`,
/// `d` being the pixel-unit distance from the pixel center to the segment.
/// Pixel `(r, c)` is centered at `u = c`, `v = r` where
/// `u = (x + 1) / 2 · size`; strokes combine by maximum.
pub fn rasterize(sketch: &Sketch, size: usize) -> Raster {
    let mut img = Raster::blank(size);
    let limit = size as isize - 1;
    for stroke in sketch.strokes() {
        for w in stroke.points().windows(2) {
            let (a, b) = (to_pixel(&w[0], size), to_pixel(&w[1], size));
            if a == b {
                continue;
            }
            let c0 = (a.0.min(b.0).floor() as isize - 1).clamp(0, limit);
            let c1 = (a.0.max(b.0).ceil() as isize + 1).clamp(0, limit);
            let r0 = (a.1.min(b.1).floor() as isize - 1).clamp(0, limit);
            let r1 = (a.1.max(b.1).ceil() as isize + 1).clamp(0, limit);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let d = segment_distance(c as f64, r as f64, a, b);
                    let v = (1.0 - d).max(0.0);
                    let cell = &mut img.data[r as usize * size + c as usize];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
    img
}

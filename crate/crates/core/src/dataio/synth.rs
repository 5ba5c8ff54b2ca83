//! Procedural sketches composed from simple parts.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{canvas_normalize, Point, Sketch, Stroke};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticCategory {
    Face,
    House,
    Flower,
    Fish,
}

impl SyntheticCategory {
    pub const ALL: [SyntheticCategory; 4] = [
        SyntheticCategory::Face,
        SyntheticCategory::House,
        SyntheticCategory::Flower,
        SyntheticCategory::Fish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticCategory::Face => "face",
            SyntheticCategory::House => "house",
            SyntheticCategory::Flower => "flower",
            SyntheticCategory::Fish => "fish",
        }
    }

    /// Human-readable part list.
    pub fn parts(self) -> &'static str {
        match self {
            SyntheticCategory::Face => "head circle, two eyes, nose, smile, optional ears",
            SyntheticCategory::House => "walls, roof, door, window, optional chimney",
            SyntheticCategory::Flower => "center, four or five petals, stem",
            SyntheticCategory::Fish => "body, tail, eye, fin, optional bubble",
        }
    }
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    strokes: Vec<Vec<Point>>,
}

impl Builder<'_> {
    fn jitter(&mut self, amount: f64) -> f64 {
        self.rng.gen_range(-amount..amount)
    }

    /// Elliptic arc around `(cx, cy)` from angle `t0` sweeping `sweep`.
    fn arc(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, t0: f64, sweep: f64, n: usize) {
        let pts = (0..n)
            .map(|i| {
                let t = t0 + sweep * i as f64 / (n - 1) as f64;
                Point::new(cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect();
        self.strokes.push(pts);
    }

    /// Polyline through `corners`, densified and slightly bowed so no
    /// stroke is perfectly straight.
    fn poly(&mut self, corners: &[(f64, f64)], per_edge: usize) {
        let mut pts = Vec::new();
        for w in corners.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            let bow = self.jitter(0.03);
            let (nx, ny) = (-(y1 - y0), x1 - x0);
            for i in 0..per_edge {
                let t = i as f64 / per_edge as f64;
                let b = bow * (PI * t).sin();
                pts.push(Point::new(x0 + t * (x1 - x0) + b * nx, y0 + t * (y1 - y0) + b * ny));
            }
        }
        let &(x, y) = corners.last().unwrap();
        pts.push(Point::new(x, y));
        self.strokes.push(pts);
    }

    fn face(&mut self) {
        let r = 0.8 + self.jitter(0.08);
        let start = -PI / 2.0 + self.jitter(0.3);
        let ry = r * (1.0 + self.jitter(0.1));
        self.arc(0.0, 0.0, r, ry, start, 1.9 * PI, 28);
        for side in [-1.0, 1.0] {
            let (ex, ey) = (side * (0.3 + self.jitter(0.05)), -0.2 + self.jitter(0.05));
            let er = 0.09 + self.jitter(0.02);
            self.arc(ex, ey, er, er, PI / 2.0, 1.8 * PI, 12);
        }
        let ny = 0.05 + self.jitter(0.04);
        self.poly(&[(0.0, ny - 0.15), (-0.08, ny + 0.05), (0.06, ny + 0.07)], 4);
        let my = 0.3 + self.jitter(0.05);
        let mw = 0.35 + self.jitter(0.08);
        let mh = 0.2 + self.jitter(0.05);
        self.arc(0.0, my - 0.1, mw, mh, PI * 0.9, -0.8 * PI, 14);
        if self.rng.gen_bool(0.5) {
            for side in [-1.0, 1.0] {
                let cx = side * (r + 0.05);
                let t0 = if side < 0.0 { PI / 2.0 } else { -PI / 2.0 };
                self.arc(cx, -0.05, 0.12, 0.2, t0, PI, 10);
            }
        }
    }

    fn house(&mut self) {
        let w = 0.6 + self.jitter(0.1);
        let (top, bottom) = (-0.1 + self.jitter(0.05), 0.8 + self.jitter(0.05));
        self.poly(&[(-w, top), (-w, bottom), (w, bottom), (w, top)], 6);
        let peak = -0.8 + self.jitter(0.08);
        let px = self.jitter(0.1);
        self.poly(&[(-w - 0.15, top + 0.05), (px, peak), (w + 0.15, top + 0.05)], 7);
        let dx = self.jitter(0.2);
        let dh = 0.35 + self.jitter(0.08);
        self.poly(
            &[
                (dx - 0.15, bottom),
                (dx - 0.15, bottom - dh),
                (dx + 0.15, bottom - dh),
                (dx + 0.15, bottom),
            ],
            4,
        );
        let wx = if dx > 0.0 { -w * 0.55 } else { w * 0.55 };
        let (wy, ws) = (0.15 + self.jitter(0.05), 0.12 + self.jitter(0.03));
        self.poly(
            &[
                (wx - ws, wy - ws),
                (wx + ws, wy - ws),
                (wx + ws, wy + ws),
                (wx - ws, wy + ws),
                (wx - ws, wy - ws * 0.8),
            ],
            3,
        );
        if self.rng.gen_bool(0.5) {
            let cx = w * 0.5;
            self.poly(
                &[
                    (cx - 0.08, -0.4),
                    (cx - 0.08, -0.65),
                    (cx + 0.08, -0.65),
                    (cx + 0.08, -0.3),
                ],
                3,
            );
        }
    }

    fn flower(&mut self) {
        let cy = -0.35 + self.jitter(0.08);
        let cr = 0.15 + self.jitter(0.03);
        self.arc(0.0, cy, cr, cr, -PI / 2.0, 1.9 * PI, 14);
        let n = self.rng.gen_range(4..=5);
        let phase = self.jitter(0.3);
        for k in 0..n {
            let a = phase - PI / 2.0 + 2.0 * PI * k as f64 / n as f64;
            let (px, py) = (cr * a.cos(), cy + cr * a.sin());
            let len = 0.35 + self.jitter(0.05);
            let half = 0.13 + self.jitter(0.03);
            // A petal is a loop leaving the center outward and returning.
            // Petals facing left are drawn tip-first so that no stroke's
            // orientation sits next to the ±π seam.
            let mut pts: Vec<Point> = (0..14)
                .map(|i| {
                    let t = PI * i as f64 / 13.0;
                    let (u, v) = (len * t.sin(), half * (2.0 * t).sin() * 0.8 + half * 0.2 * t.cos());
                    Point::new(px + u * a.cos() - v * a.sin(), py + u * a.sin() + v * a.cos())
                })
                .collect();
            if a.cos() < -0.5 {
                let tip = pts.len() / 2;
                pts.rotate_left(tip);
            }
            self.strokes.push(pts);
        }
        let bend = 0.1 + self.jitter(0.05);
        let pts = (0..16)
            .map(|i| {
                let t = i as f64 / 15.0;
                Point::new(bend * (PI * t).sin(), cy + cr + t * (0.95 - cy - cr))
            })
            .collect();
        self.strokes.push(pts);
    }

    fn fish(&mut self) {
        let (rx, ry) = (0.6 + self.jitter(0.06), 0.35 + self.jitter(0.06));
        self.arc(0.0, 0.0, rx, ry, PI * 0.85, 1.8 * PI, 26);
        let tx = rx * 0.95;
        let tw = 0.3 + self.jitter(0.05);
        self.poly(&[(tx, -0.05), (tx + 0.35, -tw), (tx + 0.3, tw), (tx, 0.05)], 4);
        let (ex, ey) = (-rx * 0.55 + self.jitter(0.04), -0.08 + self.jitter(0.03));
        self.arc(ex, ey, 0.06, 0.06, PI, 1.8 * PI, 10);
        let fx = self.jitter(0.1);
        self.arc(fx, ry * 0.1, 0.18, 0.16, PI * 1.1, -0.9 * PI, 10);
        if self.rng.gen_bool(0.5) {
            self.arc(-rx - 0.15, -ry - 0.15, 0.07, 0.07, PI, 1.8 * PI, 10);
        }
    }
}

/// One sketch of the given category drawn with `rng`.
pub fn generate_sketch(category: SyntheticCategory, rng: &mut ChaCha8Rng) -> Sketch {
    let mut b = Builder {
        rng,
        strokes: Vec::new(),
    };
    match category {
        SyntheticCategory::Face => b.face(),
        SyntheticCategory::House => b.house(),
        SyntheticCategory::Flower => b.flower(),
        SyntheticCategory::Fish => b.fish(),
    }
    // Scale and placement are fixed by the canvas fit below; only a small
    // tilt survives it.
    let rot: f64 = b.rng.gen_range(-0.15..0.15);
    let (sin, cos) = rot.sin_cos();
    let mut strokes = Vec::new();
    for pts in std::mem::take(&mut b.strokes) {
        let pts = pts
            .into_iter()
            .map(|p| {
                let (x, y) = (p.x + b.jitter(0.004), p.y + b.jitter(0.004));
                Point::new(cos * x - sin * y, sin * x + cos * y)
            })
            .collect();
        strokes.push(Stroke::from_points(pts).expect("generated points are finite"));
    }
    canvas_normalize(&Sketch::new(strokes).expect("every category draws strokes"))
}

/// `n` sketches cycling through all categories; same seed, same output.
pub fn generate_synthetic(seed: u64, n: usize) -> Vec<Sketch> {
    generate_synthetic_from(seed, n, &SyntheticCategory::ALL)
}

pub fn generate_synthetic_from(seed: u64, n: usize, categories: &[SyntheticCategory]) -> Vec<Sketch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| generate_sketch(categories[i % categories.len()], &mut rng))
        .collect()
}

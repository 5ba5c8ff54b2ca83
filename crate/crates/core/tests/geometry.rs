use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchmod::geometry::{
    apply_attributes, canvas_normalize, corrupt_attributes, denormalize_stroke, normalize_stroke, offset_between,
    resample_stroke, wrap_angle, CorruptionNoise, NormalizedStroke, PenState, Point, Sketch, Stroke, StrokeAttributes,
};
use sketchmod::SketchError;

fn random_stroke(rng: &mut ChaCha8Rng) -> Stroke {
    let n = rng.gen_range(3..20);
    let mut p = Point::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
    let mut pts = vec![p];
    let mut heading: f64 = rng.gen_range(-PI..PI);
    for _ in 1..n {
        heading += rng.gen_range(-1.0..1.0);
        let step = rng.gen_range(0.02..0.2);
        p = Point::new(p.x + step * heading.cos(), p.y + step * heading.sin());
        pts.push(p);
    }
    Stroke::from_points(pts).unwrap()
}

fn max_point_error(a: &Stroke, b: &Stroke) -> f64 {
    assert_eq!(a.len(), b.len());
    a.points()
        .iter()
        .zip(b.points())
        .map(|(p, q)| (p.x - q.x).abs().max((p.y - q.y).abs()))
        .fold(0.0, f64::max)
}

fn xy(s: &Stroke) -> Vec<(f64, f64)> {
    s.points().iter().map(|p| (p.x, p.y)).collect()
}

#[test]
fn diamond_normalizes_to_axis_aligned_unit_square() {
    let s = Stroke::from_xy(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0), (1.0, -1.0)]).unwrap();
    let (ns, p) = normalize_stroke(&s).unwrap();
    assert_eq!(p.a, 0.0);
    assert_eq!(p.b, 0.0);
    assert_eq!(p.theta, 0.0);
    assert!((p.log_tau[0] - 2f64.ln()).abs() < 1e-15);
    assert!((p.log_tau[1] - 2f64.ln()).abs() < 1e-15);
    let expect = [(0.0, 0.5), (0.5, 1.0), (1.0, 0.5), (0.5, 0.0)];
    for (got, want) in xy(&ns.stroke).iter().zip(expect) {
        assert!((got.0 - want.0).abs() < 1e-15 && (got.1 - want.1).abs() < 1e-15);
    }
    assert_eq!(ns.stroke.pen_states(), s.pen_states());

    let back = denormalize_stroke(&ns, &p).unwrap();
    assert!(max_point_error(&back, &s) < 1e-12);
}

#[test]
fn right_angle_stroke_matches_closed_form() {
    // Start→center is (2/3, 1/3), so cos θ = 2/√5 and sin θ = 1/√5. The
    // rotated points are (0,0), (2,−1)/√5 and (3,1)/√5, giving extents
    // 3/√5 and 2/√5.
    let s = Stroke::from_xy(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]).unwrap();
    let (ns, p) = normalize_stroke(&s).unwrap();
    let r5 = 5f64.sqrt();
    assert!((p.theta - (1.0f64 / 3.0).atan2(2.0 / 3.0)).abs() < 1e-15);
    assert!((p.theta - 0.5f64.atan()).abs() < 1e-15);
    assert!((p.log_tau[0] - (3.0 / r5).ln()).abs() < 1e-9);
    assert!((p.log_tau[1] - (2.0 / r5).ln()).abs() < 1e-9);
    let expect = [(0.0, 0.5), (2.0 / 3.0, 0.0), (1.0, 1.0)];
    for (got, want) in xy(&ns.stroke).iter().zip(expect) {
        assert!((got.0 - want.0).abs() < 1e-9, "{got:?} vs {want:?}");
        assert!((got.1 - want.1).abs() < 1e-9, "{got:?} vs {want:?}");
    }
}

#[test]
fn translation_changes_only_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_stroke(&mut rng);
    let (ns, p) = normalize_stroke(&s).unwrap();
    let moved = s.translated(0.3, -0.7);
    let (ns2, p2) = normalize_stroke(&moved).unwrap();
    assert_eq!(p2.a, s.start().x + 0.3);
    assert_eq!(p2.b, s.start().y - 0.7);
    assert!((p2.theta - p.theta).abs() < 1e-12);
    assert!((p2.log_tau[0] - p.log_tau[0]).abs() < 1e-12);
    assert!((p2.log_tau[1] - p.log_tau[1]).abs() < 1e-12);
    assert!(max_point_error(&ns.stroke, &ns2.stroke) < 1e-12);
}

#[test]
fn dyadic_translation_is_bitwise_exact() {
    let s = Stroke::from_xy(&[(0.0, 0.0), (0.5, 0.25), (0.75, -0.125), (0.25, -0.5)]).unwrap();
    let (ns, p) = normalize_stroke(&s).unwrap();
    let (ns2, p2) = normalize_stroke(&s.translated(0.25, -0.5)).unwrap();
    assert_eq!(ns, ns2);
    assert_eq!((p2.a, p2.b), (p.a + 0.25, p.b - 0.5));
    assert_eq!((p2.theta, p2.log_tau), (p.theta, p.log_tau));
}

#[test]
fn zero_attributes_translate_to_origin() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (ns, _) = normalize_stroke(&random_stroke(&mut rng)).unwrap();
    let out = denormalize_stroke(&ns, &StrokeAttributes::ZERO).unwrap();
    let q0 = ns.stroke.start();
    for (o, q) in out.points().iter().zip(ns.stroke.points()) {
        assert_eq!(o.x, q.x - q0.x);
        assert_eq!(o.y, q.y - q0.y);
    }
}

#[test]
fn round_trip_over_random_strokes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let s = random_stroke(&mut rng);
        let (ns, p) = normalize_stroke(&s).unwrap();
        worst = worst.max(max_point_error(&denormalize_stroke(&ns, &p).unwrap(), &s));
    }
    assert!(worst < 1e-6, "worst round-trip error {worst}");
}

#[test]
fn normalized_start_to_center_points_along_x() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let s = random_stroke(&mut rng);
        let (ns, p) = normalize_stroke(&s).unwrap();
        assert!(p.theta > -PI && p.theta <= PI);
        let (q0, c) = (ns.stroke.start(), ns.stroke.centroid());
        // Scaling by positive extents cannot change the sign of the angle.
        let angle = (c.y - q0.y).atan2(c.x - q0.x);
        assert!(angle.abs() < 1e-6, "angle {angle}");
        let xs: Vec<f64> = ns.stroke.points().iter().map(|p| p.x).collect();
        let ys: Vec<f64> = ns.stroke.points().iter().map(|p| p.y).collect();
        for v in [&xs, &ys] {
            let lo = v.iter().cloned().fold(f64::MAX, f64::min);
            let hi = v.iter().cloned().fold(f64::MIN, f64::max);
            assert!(lo.abs() < 1e-9 && (hi - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn degenerate_strokes_are_clamped() {
    let dot = Stroke::from_xy(&[(0.2, 0.3)]).unwrap();
    let (ns, p) = normalize_stroke(&dot).unwrap();
    assert_eq!(p.theta, 0.0);
    assert_eq!(p.log_tau, [1e-6f64.ln(); 2]);
    assert_eq!(xy(&ns.stroke), vec![(0.0, 0.0)]);
    assert_eq!(denormalize_stroke(&ns, &p).unwrap(), dot);

    let line = Stroke::from_xy(&[(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]).unwrap();
    let (ns, p) = normalize_stroke(&line).unwrap();
    assert!((p.theta - PI / 4.0).abs() < 1e-15);
    assert_eq!(p.log_tau[1], 1e-6f64.ln());
    assert!(ns.stroke.points().iter().all(|q| q.y.is_finite()));
    assert!(max_point_error(&denormalize_stroke(&ns, &p).unwrap(), &line) < 1e-6);
}

#[test]
fn theta_minus_pi_maps_to_pi() {
    let s = Stroke::from_xy(&[(0.0, 0.0), (-1.0, 0.1), (-2.0, -0.1)]).unwrap();
    let (_, p) = normalize_stroke(&s).unwrap();
    assert_eq!(p.theta, PI);
    assert_eq!(wrap_angle(-PI), PI);
    assert_eq!(wrap_angle(3.0 * PI), PI);
    assert!((wrap_angle(1.5 * PI) + 0.5 * PI).abs() < 1e-15);
}

#[test]
fn normalize_rejects_bad_input() {
    let ns = NormalizedStroke {
        stroke: Stroke::from_xy(&[(0.0, 0.0)]).unwrap(),
    };
    assert!(denormalize_stroke(&ns, &StrokeAttributes::ZERO).is_ok());
    assert_eq!(Stroke::from_points(vec![]).unwrap_err(), SketchError::EmptyStroke);
    assert_eq!(
        Stroke::from_xy(&[(0.0, 0.0), (f64::NAN, 1.0)]).unwrap_err(),
        SketchError::NonFinite(1)
    );
    assert!(Stroke::new(
        vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)],
        vec![PenState::End, PenState::Lift]
    )
    .is_err());
    assert!(Stroke::new(vec![Point::new(0.0, 0.0)], vec![]).is_err());
}

#[test]
fn offsets_are_raw_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = normalize_stroke(&random_stroke(&mut rng)).unwrap().1;
    assert_eq!(offset_between(&p, &p).delta, [0.0; 5]);

    let pi = StrokeAttributes {
        a: 0.1,
        b: 0.2,
        theta: 3.0,
        log_tau: [2f64.ln(), 4f64.ln()],
    };
    let pj = StrokeAttributes {
        a: -0.3,
        b: 0.5,
        theta: -3.0,
        log_tau: [0.0, 2f64.ln()],
    };
    let d = offset_between(&pi, &pj).delta;
    assert!((d[3] - 2f64.ln()).abs() < 1e-15);
    assert!((d[4] - 2f64.ln()).abs() < 1e-15);
    // No wrapping of the angle difference.
    assert_eq!(d[2], 6.0);
    let r = offset_between(&pj, &pi).delta;
    for k in 0..5 {
        assert_eq!(d[k], -r[k]);
    }
}

#[test]
fn offset_composition_holds_to_rounding() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let ps: Vec<StrokeAttributes> = (0..3)
            .map(|_| normalize_stroke(&random_stroke(&mut rng)).unwrap().1)
            .collect();
        let ik = offset_between(&ps[0], &ps[2]).delta;
        let ij = offset_between(&ps[0], &ps[1]).delta;
        let jk = offset_between(&ps[1], &ps[2]).delta;
        for c in 0..5 {
            let scale = ps.iter().map(|p| p.to_array()[c].abs()).fold(1.0, f64::max);
            assert!((ik[c] - (ij[c] + jk[c])).abs() <= 4.0 * f64::EPSILON * scale);
        }
    }
}

#[test]
fn corruption_at_midpoint_only_rescales() {
    let p = StrokeAttributes {
        a: 0.2,
        b: -0.4,
        theta: 1.0,
        log_tau: [-1.0, -2.0],
    };
    let q = CorruptionNoise::midpoint().apply(&p);
    assert_eq!((q.a, q.b, q.theta), (p.a, p.b, p.theta));
    assert!((q.log_tau[0] - p.log_tau[0] - 1.25f64.ln()).abs() < 1e-15);
    assert!((q.log_tau[1] - p.log_tau[1] - 1.25f64.ln()).abs() < 1e-15);
}

#[test]
fn corruption_ranges_and_determinism() {
    let p = StrokeAttributes {
        a: 0.0,
        b: 0.0,
        theta: 0.0,
        log_tau: [0.0, 0.0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 100_000;
    let (mut lo, mut hi) = ([f64::MAX; 5], [f64::MIN; 5]);
    for _ in 0..n {
        let q = corrupt_attributes(&p, &mut rng);
        let v = [q.a, q.b, q.theta, q.log_tau[0].exp(), q.log_tau[1].exp()];
        for k in 0..5 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let ranges = [(-1.0, 1.0), (-1.0, 1.0), (-PI / 2.0, PI / 2.0), (0.3, 2.2), (0.3, 2.2)];
    for k in 0..5 {
        let (a, b) = ranges[k];
        let tol = 0.01 * (b - a);
        assert!(lo[k] >= a && (lo[k] - a) < tol, "component {k} min {}", lo[k]);
        assert!(hi[k] <= b && (b - hi[k]) < tol, "component {k} max {}", hi[k]);
    }

    let a = corrupt_attributes(&p, &mut ChaCha8Rng::seed_from_u64(5));
    let b = corrupt_attributes(&p, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a.to_array().map(f64::to_bits), b.to_array().map(f64::to_bits));
}

#[test]
fn resample_line_and_point() {
    let line = Stroke::from_xy(&[(0.0, 0.0), (1.0, 0.0)]).unwrap();
    let r = resample_stroke(&line, 5).unwrap();
    assert_eq!(
        xy(&r),
        vec![(0.0, 0.0), (0.25, 0.0), (0.5, 0.0), (0.75, 0.0), (1.0, 0.0)]
    );
    let mut pen = vec![PenState::Down; 4];
    pen.push(PenState::Lift);
    assert_eq!(r.pen_states(), pen.as_slice());

    let dot = Stroke::from_xy(&[(0.3, -0.2)]).unwrap();
    assert_eq!(xy(&resample_stroke(&dot, 4).unwrap()), vec![(0.3, -0.2); 4]);
    assert!(resample_stroke(&dot, 1).is_err());
}

#[test]
fn resample_keeps_endpoints_and_spacing() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let s = random_stroke(&mut rng);
        let r = resample_stroke(&s, 32).unwrap();
        assert_eq!(r.len(), 32);
        assert_eq!(r.start(), s.start());
        assert_eq!(r.points()[31], *s.points().last().unwrap());
        // Every sample lies on the source polyline, so the resampled
        // polyline is a chord approximation and can only be shorter.
        assert!(r.arc_length() <= s.arc_length() + 1e-12);
    }
}

#[test]
fn resample_preserves_length_of_collinear_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let (dx, dy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let mut t = 0.0;
        let mut pts = vec![];
        for _ in 0..rng.gen_range(2..12) {
            pts.push((t * dx, t * dy));
            t += rng.gen_range(0.01..0.3);
        }
        let s = Stroke::from_xy(&pts).unwrap();
        let r = resample_stroke(&s, 32).unwrap();
        assert!((r.arc_length() - s.arc_length()).abs() < 1e-6);
    }
}

#[test]
fn apply_attributes_identity_scale_and_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let s = random_stroke(&mut rng);
        let (_, p) = normalize_stroke(&s).unwrap();
        assert!(max_point_error(&apply_attributes(&s, &p).unwrap(), &s) < 1e-6);

        let mut bigger = p;
        bigger.log_tau[0] += 2f64.ln();
        bigger.log_tau[1] += 2f64.ln();
        let out = apply_attributes(&s, &bigger).unwrap();
        let o = s.start();
        for (q, r) in s.points().iter().zip(out.points()) {
            assert!((r.dist(&o) - 2.0 * q.dist(&o)).abs() < 1e-9);
        }

        let mut turned = p;
        turned.theta += PI / 2.0;
        let out = apply_attributes(&s, &turned).unwrap();
        for (q, r) in s.points().iter().zip(out.points()) {
            let (dx, dy) = (q.x - o.x, q.y - o.y);
            let (ex, ey) = (0.0 * dx - 1.0 * dy + o.x, 1.0 * dx + 0.0 * dy + o.y);
            assert!((r.x - ex).abs() < 1e-9 && (r.y - ey).abs() < 1e-9);
        }
    }
}

#[test]
fn canvas_normalize_fits_unit_box() {
    let sketch = Sketch::new(vec![
        Stroke::from_xy(&[(10.0, 10.0), (30.0, 20.0)]).unwrap(),
        Stroke::from_xy(&[(20.0, 15.0), (25.0, 12.0)]).unwrap(),
    ])
    .unwrap();
    let c = canvas_normalize(&sketch);
    let first = xy(&c.strokes()[0]);
    assert_eq!(first, vec![(-1.0, -0.5), (1.0, 0.5)]);
    assert!(c.points().all(|p| p.x.abs() <= 1.0 && p.y.abs() <= 1.0));
}

#[test]
fn sketch_json_round_trip_and_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sketch = Sketch::new((0..3).map(|_| random_stroke(&mut rng)).collect()).unwrap();
    let text = sketch.to_json();
    assert!(text.starts_with("{\"version\":1,"));
    assert_eq!(Sketch::from_json(&text).unwrap(), sketch);
    assert!(Sketch::from_json(r#"{"version":2,"strokes":[]}"#).is_err());
    assert!(Sketch::from_json(r#"{"version":1,"strokes":[]}"#).is_err());
    assert!(Sketch::from_json(r#"{"version":1,"strokes":[{"points":[[0,0],[1,1]],"pen":["down"]}]}"#).is_err());
    let ok = r#"{"version":1,"strokes":[{"points":[[0,0],[1,1]],"pen":["down","end"]}]}"#;
    assert_eq!(Sketch::from_json(ok).unwrap().len(), 1);
}

fn arb_stroke() -> impl Strategy<Value = Stroke> {
    proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3..16)
        .prop_filter("needs spread", |pts| {
            let (x0, y0) = pts[0];
            pts.iter().any(|&(x, y)| (x - x0).abs() + (y - y0).abs() > 0.05)
        })
        .prop_map(|pts| Stroke::from_xy(&pts).unwrap())
}

fn arb_attrs() -> impl Strategy<Value = StrokeAttributes> {
    (-1.0f64..1.0, -1.0f64..1.0, -3.1f64..3.1, -3.0f64..1.0, -3.0f64..1.0).prop_map(|(a, b, theta, t1, t2)| {
        StrokeAttributes {
            a,
            b,
            theta,
            log_tau: [t1, t2],
        }
    })
}

proptest! {
    #[test]
    fn prop_round_trip(s in arb_stroke()) {
        let (ns, p) = normalize_stroke(&s).unwrap();
        prop_assert!(max_point_error(&denormalize_stroke(&ns, &p).unwrap(), &s) < 1e-6);
    }

    #[test]
    fn prop_translation_covariance(s in arb_stroke(), dx in -1.0f64..1.0, dy in -1.0f64..1.0) {
        let (ns, p) = normalize_stroke(&s).unwrap();
        let (ns2, p2) = normalize_stroke(&s.translated(dx, dy)).unwrap();
        prop_assert!(max_point_error(&ns.stroke, &ns2.stroke) < 1e-9);
        prop_assert!((p2.a - p.a - dx).abs() < 1e-12 && (p2.b - p.b - dy).abs() < 1e-12);
        prop_assert!(wrap_angle(p2.theta - p.theta).abs() < 1e-9);
    }

    #[test]
    fn prop_offset_antisymmetry(p in arb_attrs(), q in arb_attrs()) {
        let d = offset_between(&p, &q).delta;
        let r = offset_between(&q, &p).delta;
        for k in 0..5 {
            prop_assert_eq!(d[k], -r[k]);
        }
    }

    #[test]
    fn prop_corruption_is_pure(p in arb_attrs(), seed in any::<u64>()) {
        let a = corrupt_attributes(&p, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = corrupt_attributes(&p, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a.to_array().map(f64::to_bits), b.to_array().map(f64::to_bits));
        prop_assert!(a.theta > -PI && a.theta <= PI);
    }

    #[test]
    fn prop_apply_attributes_idempotent(s in arb_stroke(), p in arb_attrs()) {
        let once = apply_attributes(&s, &p).unwrap();
        let twice = apply_attributes(&once, &p).unwrap();
        prop_assert!(max_point_error(&once, &twice) < 1e-6);
    }
}

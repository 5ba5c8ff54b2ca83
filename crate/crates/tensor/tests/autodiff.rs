use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchmod_tensor::gradcheck;
use sketchmod_tensor::{cosine_lr, AdamW, AdamWConfig, Checkpoint, ParamStore, Tape, Tensor, TensorError};

const H: f64 = gradcheck::STEP;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

#[test]
fn every_op_passes_finite_difference_checks_over_ten_seeds() {
    for case in gradcheck::op_cases() {
        for seed in 0..10u64 {
            let report = case.check(seed).unwrap();
            assert!(
                report.max_rel_error < TOL,
                "{} seed {seed}: rel err {} at {:?} (analytic {}, numeric {})",
                case.name,
                report.max_rel_error,
                report.worst,
                report.analytic,
                report.numeric
            );
        }
    }
}

#[test]
fn composite_attention_block_gradients() {
    // softmax(Q Kᵀ) V with a masked key, plus layer norm and gelu on top.
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = vec![
            random(&mut rng, &[2, 3, 4]),
            random(&mut rng, &[4, 4]),
            random(&mut rng, &[4]),
        ];
        let report = gradcheck::check(&inputs, H, |t, v| {
            let q = t.matmul(v[0], v[1])?;
            let qb = t.add(q, v[2])?;
            let s = t.matmul_nt(qb, v[0])?;
            let mask: Vec<bool> = (0..18).map(|i| i % 3 == 2).collect();
            let s = t.masked_fill(s, &mask, f64::NEG_INFINITY)?;
            let a = t.softmax(s)?;
            let h = t.matmul(a, v[0])?;
            let n = t.layer_norm(h, 1e-5)?;
            let g = t.gelu(n);
            gradcheck::weighted_sum(t, g)
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "seed {seed}: {report:?}");
    }
}

#[test]
fn softmax_of_uniform_logits() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = t.softmax(x).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn masked_softmax_entries_get_exactly_zero_probability() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![2, 3], vec![0.3, 9.0, -1.0, 2.0, 0.0, 5.0]).unwrap());
    let mask = [false, true, false, true, false, false];
    let m = t.masked_fill(x, &mask, f64::NEG_INFINITY).unwrap();
    let y = t.softmax(m).unwrap();
    let y = t.value(y).data();
    assert_eq!(y[1], 0.0);
    assert_eq!(y[3], 0.0);
    assert!((y[0] + y[2] - 1.0).abs() < 1e-12);
    assert!((y[4] + y[5] - 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[2, 8], 3.25));
    let y = t.layer_norm(x, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn gelu_limits() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0, 10.0]));
    let y = t.gelu(x);
    let y = t.value(y).data();
    assert_eq!(y[0], 0.0);
    assert!((y[1] - 10.0).abs() < 1e-4);
}

#[test]
fn linear_map_gradient_has_rows_equal_to_input() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1)).unwrap();
    let x_vals = vec![1.0, -2.0, 0.5, 4.0];
    let mut t = Tape::new();
    let wv = t.param(&store, w);
    let x = t.constant(Tensor::new(vec![4, 1], x_vals.clone()).unwrap());
    let y = t.matmul(wv, x).unwrap();
    let loss = t.sum(y);
    let grads = t.backward(loss).unwrap();
    let g = grads.param(w).unwrap();
    for row in g.data().chunks(4) {
        assert_eq!(row, x_vals.as_slice());
    }
}

#[test]
fn mse_gradient_closed_form() {
    let y = vec![0.5, -1.0, 2.0, 0.0];
    let yhat = vec![1.5, -0.5, 1.0, 0.25];
    let mut t = Tape::new();
    let target = t.constant(Tensor::vector(y.clone()));
    let pred = t.variable(Tensor::vector(yhat.clone()));
    let loss = t.mse(pred, target).unwrap();
    let grads = t.backward(loss).unwrap();
    let g = grads.of(pred).unwrap().data();
    for i in 0..4 {
        assert!((g[i] - 2.0 * (yhat[i] - y[i]) / 4.0).abs() < 1e-15);
    }
}

#[test]
fn backward_errors() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(t.backward(x).unwrap_err(), TensorError::NotScalar(vec![2]));
    let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let s = t.sum(c);
    assert_eq!(t.backward(s).unwrap_err(), TensorError::DetachedTensor);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 5]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(t.add(a, b).is_err());
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = store.add("b", Tensor::vector(vec![3.0, 4.0])).unwrap();
    let mut t = Tape::with_trainable([b]);
    let av = t.param(&store, a);
    let bv = t.param(&store, b);
    let p = t.mul(av, bv).unwrap();
    let loss = t.sum(p);
    let grads = t.backward(loss).unwrap();
    assert!(grads.param(a).is_none());
    assert_eq!(grads.param(b).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn adamw_zero_gradient_zero_decay_leaves_parameters() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![0.3, -0.7])).unwrap();
    let before = store.get(w).tensor.clone();
    let config = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(config, &store, &[w]);
    let mut t = Tape::new();
    let wv = t.param(&store, w);
    let z = t.scale(wv, 0.0);
    let loss = t.sum(z);
    let grads = t.backward(loss).unwrap();
    for _ in 0..3 {
        opt.step(&mut store, &grads, 1e-3);
    }
    assert_eq!(store.get(w).tensor, before);
}

#[test]
fn adamw_defaults() {
    let c = AdamWConfig::default();
    assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
    assert_eq!(c.weight_decay, 0.01);
}

#[test]
fn adamw_two_steps_match_hand_recurrence() {
    // loss = w² with w0 = 1, lr = 0.1, decay 0.01.
    let (lr, wd, b1, b2, eps) = (0.1, 0.01, 0.9, 0.999, 1e-8);
    let mut w_ref = 1.0f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    for step in 1..=2 {
        let g = 2.0 * w_ref;
        w_ref -= lr * wd * w_ref;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(step));
        let v_hat = v / (1.0 - b2.powi(step));
        w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
    }

    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(1.0)).unwrap();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        },
        &store,
        &[w],
    );
    for _ in 0..2 {
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let loss = t.square(wv);
        let grads = t.backward(loss).unwrap();
        opt.step(&mut store, &grads, lr);
    }
    let got = store.get(w).tensor.item().unwrap();
    assert!((got - w_ref).abs() < 1e-12, "{got} vs {w_ref}");
}

#[test]
fn cosine_schedule_points() {
    assert_eq!(cosine_lr(0, 100, 0.001), 0.001);
    assert!(cosine_lr(100, 100, 0.001).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 0.001) - 0.0005).abs() < 1e-15);
}

#[test]
fn store_checkpoint_round_trip_and_hash() {
    let mut store = ParamStore::new();
    store.add("enc.w", Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
    store.add("enc.b", Tensor::vector(vec![0.5, 0.25, -1.0])).unwrap();
    assert!(store.add("enc.b", Tensor::scalar(0.0)).is_err());
    let ck = Checkpoint {
        metadata: "m".into(),
        tensors: store.named_tensors(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let mut other = store.clone();
    *other.tensor_mut(other.id("enc.w").unwrap()) = Tensor::zeros(&[2, 3]);
    assert_ne!(other.content_hash(None), store.content_hash(None));
    other.load_named(&loaded.tensors).unwrap();
    assert_eq!(other.content_hash(None), store.content_hash(None));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(row));
            let y = t.softmax(x).unwrap();
            let s: f64 = t.value(y).data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn checkpoint_bytes_round_trip(
            data in proptest::collection::vec(proptest::num::f64::NORMAL, 0..40),
            meta in "[a-z{}:\"0-9]{0,30}",
        ) {
            let ck = Checkpoint {
                metadata: meta,
                tensors: vec![("p".into(), Tensor::vector(data))],
            };
            prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
        }
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let a = t.variable(random(&mut rng, &[4, 8]));
        let b = t.variable(random(&mut rng, &[8, 3]));
        let y = t.matmul(a, b).unwrap();
        let y = t.tanh(y);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        (t.value(l).clone(), g.of(a).unwrap().clone(), g.of(b).unwrap().clone())
    };
    assert_eq!(run(), run());
}

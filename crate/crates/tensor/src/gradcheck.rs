//! Central finite-difference gradient checks.
//!
//! The checker only ever evaluates the forward pass, so it stays independent
//! of the reverse-mode path it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for the per-op checks.
pub const STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so exact-zero gradients compare
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `f` with central differences of step `h`
/// over every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .of(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_error(analytic.data()[j], numeric);
            if err > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: err,
                    worst: (i, j),
                    analytic: analytic.data()[j],
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Reduces an arbitrary tensor to a scalar with non-uniform weights so that
/// every output element influences the loss differently.
pub fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).numel();
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |i| {
        ((i * 7919) % n.max(1)) as f64 / n as f64 - 0.3
    }));
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One differentiable op with input shapes for its check.
#[derive(Clone)]
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs are drawn from [0.5, 2) instead of (−1.5, 1.5).
    pub positive: bool,
    pub op: OpFn,
}

impl std::fmt::Debug for OpCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpCase")
            .field("name", &self.name)
            .field("shapes", &self.shapes)
            .finish()
    }
}

impl OpCase {
    pub fn inputs(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let range = if self.positive { 0.5..2.0 } else { -1.5..1.5 };
        self.shapes
            .iter()
            .map(|s| Tensor::from_fn(s, |_| rng.gen_range(range.clone())))
            .collect()
    }

    /// Checks the op on inputs drawn from `seed`, reduced by [`weighted_sum`].
    pub fn check(&self, seed: u64) -> Result<GradCheck> {
        check(&self.inputs(seed), STEP, |t, v| {
            let out = (self.op)(t, v)?;
            weighted_sum(t, out)
        })
    }
}

fn case(name: &'static str, shapes: &[&[usize]], positive: bool, op: OpFn) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive,
        op,
    }
}

/// Every differentiable tape op.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul_shared", &[&[2, 3, 4], &[4, 5]], false, |t, v| {
            t.matmul(v[0], v[1])
        }),
        case("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], false, |t, v| {
            t.matmul(v[0], v[1])
        }),
        case("matmul_nt", &[&[2, 3, 4], &[2, 5, 4]], false, |t, v| {
            t.matmul_nt(v[0], v[1])
        }),
        case("matmul_nt_shared", &[&[3, 4], &[5, 4]], false, |t, v| {
            t.matmul_nt(v[0], v[1])
        }),
        case("linear", &[&[2, 3, 4], &[4, 5], &[5]], false, |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        case("add_bcast", &[&[2, 3, 4], &[4]], false, |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], false, |t, v| t.sub(v[0], v[1])),
        case("mul_bcast", &[&[2, 3, 4], &[3, 4]], false, |t, v| t.mul(v[0], v[1])),
        case("div", &[&[3, 4], &[3, 4]], true, |t, v| t.div(v[0], v[1])),
        case("scale", &[&[5]], false, |t, v| Ok(t.scale(v[0], -2.5))),
        case("add_scalar", &[&[5]], false, |t, v| Ok(t.add_scalar(v[0], 0.7))),
        case("exp", &[&[6]], false, |t, v| Ok(t.exp(v[0]))),
        case("log", &[&[6]], true, |t, v| Ok(t.log(v[0]))),
        case("tanh", &[&[6]], false, |t, v| Ok(t.tanh(v[0]))),
        case("sigmoid", &[&[6]], false, |t, v| Ok(t.sigmoid(v[0]))),
        case("gelu", &[&[6]], false, |t, v| Ok(t.gelu(v[0]))),
        case("square", &[&[6]], false, |t, v| Ok(t.square(v[0]))),
        case("softmax", &[&[3, 5]], false, |t, v| t.softmax(v[0])),
        case("log_softmax", &[&[3, 5]], false, |t, v| t.log_softmax(v[0])),
        case("logsumexp", &[&[3, 5]], false, |t, v| t.logsumexp(v[0])),
        case("layer_norm", &[&[3, 6]], false, |t, v| t.layer_norm(v[0], 1e-5)),
        case("sum", &[&[3, 4]], false, |t, v| Ok(t.sum(v[0]))),
        case("mean", &[&[3, 4]], false, |t, v| Ok(t.mean(v[0]))),
        case("sum_last", &[&[3, 4]], false, |t, v| t.sum_last(v[0])),
        case("mse", &[&[3, 4], &[3, 4]], false, |t, v| t.mse(v[0], v[1])),
        case("concat", &[&[2, 3], &[2, 2]], false, |t, v| {
            t.concat(&[v[0], v[1], v[0]])
        }),
        case("narrow", &[&[3, 6]], false, |t, v| t.narrow(v[0], 2, 3)),
        case("reshape", &[&[3, 4]], false, |t, v| t.reshape(v[0], &[2, 6])),
        case("transpose", &[&[2, 3, 4]], false, |t, v| t.transpose(v[0])),
        case("swap_axes12", &[&[2, 3, 4, 2]], false, |t, v| t.swap_axes12(v[0])),
        case("select_rows", &[&[3, 4, 2]], false, |t, v| {
            t.select_rows(v[0], &[3, 0, 3])
        }),
        case("repeat_axis1", &[&[2, 3]], false, |t, v| t.repeat_axis1(v[0], 4)),
        case("pairwise_diff", &[&[2, 3, 5]], false, |t, v| t.pairwise_diff(v[0])),
        case("masked_fill", &[&[2, 3]], false, |t, v| {
            t.masked_fill(v[0], &[true, false, false, true, false, true], -7.0)
        }),
        case("im2col3", &[&[2, 3, 4, 2]], false, |t, v| t.im2col3(v[0])),
        case("upsample2", &[&[1, 2, 3, 2]], false, |t, v| t.upsample2(v[0])),
    ]
}

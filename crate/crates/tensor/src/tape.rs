//! Tape-recorded operations and the reverse sweep.
//!
//! Every op appends one node holding its forward value. Node indices are a
//! topological order by construction, so `backward` walks them in reverse and
//! visits each node once.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::gemm::gemm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm { a: Var, eps: f64 },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Concat { parts: Vec<Var> },
    Narrow { a: Var, start: usize },
    Reshape(Var),
    TransposeLast2(Var),
    SwapAxes12(Var),
    SelectRows { a: Var, idx: Vec<usize> },
    RepeatAxis1 { a: Var, n: usize },
    PairwiseDiff(Var),
    MaskedFill { a: Var, mask: Vec<bool> },
    Mse { a: Var, b: Var },
    Im2Col3(Var),
    Upsample2(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug)]
enum Trainable {
    All,
    Only(HashSet<ParamId>),
    None,
}

/// Recorded graph for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    trainable: Trainable,
    param_leaves: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn of(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.params.iter_mut().map(|(id, t)| (*id, t))
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales every parameter gradient so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for t in self.params.values_mut() {
                t.data_mut().iter_mut().for_each(|g| *g *= factor);
            }
        }
        norm
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn last_dim(shape: &[usize], op: &'static str) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| invalid(op, "expected at least one axis"))
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

fn logsumexp_rows(x: &[f64], width: usize) -> Vec<f64> {
    x.chunks(width)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Layer normalization over rows; returns (normalized, inverse std per row).
fn layer_norm_rows(x: &[f64], width: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / width.max(1));
    for (row, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

impl Tape {
    /// Tape on which every parameter tracks gradients.
    pub fn new() -> Self {
        Self::with_trainable_mode(Trainable::All)
    }

    /// Tape on which only the listed parameters track gradients.
    pub fn with_trainable(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Self::with_trainable_mode(Trainable::Only(ids.into_iter().collect()))
    }

    /// Tape on which no parameter tracks gradients.
    pub fn inference() -> Self {
        Self::with_trainable_mode(Trainable::None)
    }

    fn with_trainable_mode(trainable: Trainable) -> Self {
        Self {
            nodes: Vec::new(),
            trainable,
            param_leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameter ids that entered this tape, in first-use order.
    pub fn params_used(&self) -> Vec<ParamId> {
        let mut used: Vec<(Var, ParamId)> = self.param_leaves.iter().map(|(id, v)| (*v, *id)).collect();
        used.sort_by_key(|(v, _)| v.0);
        used.into_iter().map(|(_, id)| id).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free input that tracks gradients (used for checks on inputs).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let trainable = match &self.trainable {
            Trainable::All => true,
            Trainable::Only(set) => set.contains(&id),
            Trainable::None => false,
        };
        let v = self.push(store.get(id).tensor.clone(), Op::Param(id), trainable);
        self.param_leaves.insert(id, v);
        v
    }

    /// Stop-gradient: a constant copy of `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` where `a` is `[.., m, k]` and `b` is either `[k, n]` (shared
    /// across the leading axes) or `[.., k, n]` with the same leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes of `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch(op, &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sb.len() == 2 {
            gemm(batch * m, k, n, av, false, bv, trans_b, &mut out, false);
        } else if sb[..sb.len() - 2] == *lead {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        } else {
            return Err(mismatch(op, &sa, &sb));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// `x · w + bias` with `w: [in, out]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    /// `a + b`; `b`'s shape must be a suffix of `a`'s (broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_scalar, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    // ---- normalization over the last axis --------------------------------

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let width = last_dim(self.shape(a), "softmax")?;
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), softmax_rows(v.data(), width))?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let width = last_dim(self.shape(a), "log_softmax")?;
        let v = self.value(a);
        let lse = logsumexp_rows(v.data(), width);
        let data = v.data().iter().enumerate().map(|(i, &x)| x - lse[i / width]).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::LogSoftmax(a), rg))
    }

    /// log Σ exp over the last axis; drops that axis.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = last_dim(&shape, "logsumexp")?;
        let data = logsumexp_rows(self.value(a).data(), width);
        let t = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::LogSumExp(a), rg))
    }

    /// Layer normalization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let width = last_dim(self.shape(a), "layer_norm")?;
        let v = self.value(a);
        let (data, _) = layer_norm_rows(v.data(), width, eps);
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::LayerNorm { a, eps }, rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.requires_grad(a);
        self.push(t, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel().max(1) as f64);
        let rg = self.requires_grad(a);
        self.push(t, Op::MeanAll(a), rg)
    }

    /// Sum over the last axis; drops that axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = last_dim(&shape, "sum_last")?;
        let data = if width == 0 {
            vec![0.0; numel(&shape[..shape.len() - 1])]
        } else {
            self.value(a).data().chunks(width).map(|c| c.iter().sum()).collect()
        };
        let t = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::SumLast(a), rg))
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("mse", sa, sb));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = av.len().max(1) as f64;
        let total: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { a, b }, rg))
    }

    // ---- layout ---------------------------------------------------------

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = last_dim(&shape, "narrow")?;
        if start + len > width {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} exceeds width {width}", start + len),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Narrow { a, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(invalid("transpose", "expected at least two axes"));
        }
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let t = transpose_last2(self.value(a).data(), m, n);
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape.swap(r - 2, r - 1);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(out_shape, t)?, Op::TransposeLast2(a), rg))
    }

    /// `[p, q, r, s] -> [p, r, q, s]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(invalid("swap_axes12", format!("expected rank 4, got {shape:?}")));
        }
        let data = swap12(self.value(a).data(), &shape);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(vec![shape[0], shape[2], shape[1], shape[3]], data)?,
            Op::SwapAxes12(a),
            rg,
        ))
    }

    /// Picks `a[b, idx[b], ..]` for every leading index `b`.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[0] != idx.len() {
            return Err(mismatch("select_rows", &shape, &[idx.len()]));
        }
        let rows = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(invalid("select_rows", format!("index {bad} >= {rows}")));
        }
        let inner = numel(&shape[2..]);
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for (b, &i) in idx.iter().enumerate() {
            let start = (b * rows + i) * inner;
            data.extend_from_slice(&v[start..start + inner]);
        }
        let mut out_shape = vec![shape[0]];
        out_shape.extend_from_slice(&shape[2..]);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::SelectRows { a, idx: idx.to_vec() },
            rg,
        ))
    }

    /// `[p, ..] -> [p, n, ..]` by repetition.
    pub fn repeat_axis1(&mut self, a: Var, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("repeat_axis1", "expected at least one axis"));
        }
        let inner = numel(&shape[1..]);
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(v.len() * n);
        for row in v.chunks(inner.max(1)).take(shape[0]) {
            for _ in 0..n {
                data.extend_from_slice(row);
            }
        }
        let mut out_shape = vec![shape[0], n];
        out_shape.extend_from_slice(&shape[1..]);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::RepeatAxis1 { a, n }, rg))
    }

    /// `[p, s, c] -> [p, s, s, c]` with `out[b, i, j] = a[b, i] - a[b, j]`.
    pub fn pairwise_diff(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(invalid("pairwise_diff", format!("expected rank 3, got {shape:?}")));
        }
        let (p, s, c) = (shape[0], shape[1], shape[2]);
        let v = self.value(a).data();
        let mut data = vec![0.0; p * s * s * c];
        for b in 0..p {
            for i in 0..s {
                for j in 0..s {
                    let dst = ((b * s + i) * s + j) * c;
                    for k in 0..c {
                        data[dst + k] = v[(b * s + i) * c + k] - v[(b * s + j) * c + k];
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(vec![p, s, s, c], data)?, Op::PairwiseDiff(a), rg))
    }

    /// Replaces entries where `mask` is true with `value`; those entries pass no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let v = self.value(a);
        if mask.len() != v.numel() {
            return Err(mismatch("masked_fill", v.shape(), &[mask.len()]));
        }
        let data = v
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::MaskedFill { a, mask: mask.to_vec() }, rg))
    }

    /// 3×3 patches with zero padding: `[p, h, w, c] -> [p, h, w, 9c]`.
    pub fn im2col3(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(invalid("im2col3", format!("expected rank 4, got {shape:?}")));
        }
        let (p, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let v = self.value(a).data();
        let mut data = vec![0.0; p * h * w * 9 * c];
        for b in 0..p {
            for y in 0..h {
                for x in 0..w {
                    let dst = ((b * h + y) * w + x) * 9 * c;
                    for (k, (dy, dx)) in KERNEL3.iter().enumerate() {
                        let (sy, sx) = (y as isize + dy, x as isize + dx);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        data[dst + k * c..dst + (k + 1) * c].copy_from_slice(&v[src..src + c]);
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(vec![p, h, w, 9 * c], data)?, Op::Im2Col3(a), rg))
    }

    /// Nearest-neighbour ×2 upsampling: `[p, h, w, c] -> [p, 2h, 2w, c]`.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(invalid("upsample2", format!("expected rank 4, got {shape:?}")));
        }
        let (p, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let v = self.value(a).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; p * h2 * w2 * c];
        for b in 0..p {
            for y in 0..h2 {
                for x in 0..w2 {
                    let src = ((b * h + y / 2) * w + x / 2) * c;
                    let dst = ((b * h2 + y) * w2 + x) * c;
                    data[dst..dst + c].copy_from_slice(&v[src..src + c]);
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(vec![p, h2, w2, c], data)?, Op::Upsample2(a), rg))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedTensor);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut params = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Param(id) => {
                    params.insert(*id, g.clone());
                }
                Op::Leaf => {}
                op => self.propagate(op, &node.value, &g, &mut grads)?,
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches its node")
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, gd, grads),
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                let gb = self.reduce_to(*b, gd, |_, gi| gi);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                let gb = self.reduce_to(*b, gd, |_, gi| -gi);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                if self.requires_grad(*a) {
                    let ga = gd.iter().enumerate().map(|(i, gi)| gi * bv[i % nb]).collect();
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.requires_grad(*b) {
                    let gb = self.reduce_to(*b, gd, |i, gi| gi * av[i]);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                if self.requires_grad(*a) {
                    let ga = gd.iter().enumerate().map(|(i, gi)| gi / bv[i % nb]).collect();
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.requires_grad(*b) {
                    let gb = self.reduce_to(*b, gd, |i, gi| {
                        let d = bv[i % nb];
                        -gi * av[i] / (d * d)
                    });
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale { a, c } => {
                let ga = gd.iter().map(|gi| gi * c).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => self.elementwise(*a, gd, out.data(), grads, |_, y| y),
            Op::Log(a) => {
                let x = self.value(*a).data();
                let ga = gd.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Tanh(a) => self.elementwise(*a, gd, out.data(), grads, |_, y| 1.0 - y * y),
            Op::Sigmoid(a) => self.elementwise(*a, gd, out.data(), grads, |_, y| y * (1.0 - y)),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = gd.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi)).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let ga = gd.iter().zip(x).map(|(gi, xi)| 2.0 * gi * xi).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Softmax(a) => {
                let w = *out.shape().last().unwrap();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / w.max(1) {
                    let s = r * w;
                    let dot: f64 = (s..s + w).map(|i| gd[i] * y[i]).sum();
                    for i in s..s + w {
                        ga[i] = y[i] * (gd[i] - dot);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::LogSoftmax(a) => {
                let w = *out.shape().last().unwrap();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / w.max(1) {
                    let s = r * w;
                    let total: f64 = gd[s..s + w].iter().sum();
                    for i in s..s + w {
                        let p = if y[i] == f64::NEG_INFINITY { 0.0 } else { y[i].exp() };
                        ga[i] = gd[i] - p * total;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a).data();
                let w = *self.shape(*a).last().unwrap();
                let sm = softmax_rows(x, w);
                let ga = sm.iter().enumerate().map(|(i, p)| p * gd[i / w]).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::LayerNorm { a, eps } => {
                let x = self.value(*a).data();
                let w = *self.shape(*a).last().unwrap();
                let (y, inv) = layer_norm_rows(x, w, *eps);
                let mut ga = vec![0.0; x.len()];
                for (r, &inv_std) in inv.iter().enumerate() {
                    let s = r * w;
                    let mean_g: f64 = gd[s..s + w].iter().sum::<f64>() / w as f64;
                    let mean_gy: f64 = (s..s + w).map(|i| gd[i] * y[i]).sum::<f64>() / w as f64;
                    for i in s..s + w {
                        ga[i] = inv_std * (gd[i] - mean_g - y[i] * mean_gy);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0] / n as f64; n]));
            }
            Op::SumLast(a) => {
                let w = *self.shape(*a).last().unwrap();
                let n = self.value(*a).numel();
                let ga = (0..n).map(|i| gd[i / w]).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * gd[0] / av.len().max(1) as f64;
                let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                if self.requires_grad(*b) {
                    let gb = diff.iter().map(|d| -d).collect();
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
                self.accumulate(grads, *a, self.like(*a, diff));
            }
            Op::Concat { parts } => {
                let total = *out.shape().last().unwrap();
                let rows = out.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, self.like(p, gp));
                    }
                    offset += w;
                }
            }
            Op::Narrow { a, start } => {
                let width = *self.shape(*a).last().unwrap();
                let len = *out.shape().last().unwrap();
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (r, row) in gd.chunks(len.max(1)).enumerate() {
                    let dst = r * width + start;
                    ga[dst..dst + len].copy_from_slice(row);
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, self.like(*a, gd.to_vec())),
            Op::TransposeLast2(a) => {
                let s = out.shape();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                self.accumulate(grads, *a, self.like(*a, transpose_last2(gd, m, n)));
            }
            Op::SwapAxes12(a) => {
                self.accumulate(grads, *a, self.like(*a, swap12(gd, out.shape())));
            }
            Op::SelectRows { a, idx } => {
                let shape = self.shape(*a);
                let rows = shape[1];
                let inner = numel(&shape[2..]);
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (b, &i) in idx.iter().enumerate() {
                    let dst = (b * rows + i) * inner;
                    for k in 0..inner {
                        ga[dst + k] += gd[b * inner + k];
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::RepeatAxis1 { a, n } => {
                let inner = numel(&self.shape(*a)[1..]);
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (chunk_idx, chunk) in gd.chunks(inner.max(1)).enumerate() {
                    let b = chunk_idx / n;
                    for (k, v) in chunk.iter().enumerate() {
                        ga[b * inner + k] += v;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::PairwiseDiff(a) => {
                let shape = self.shape(*a);
                let (p, s, c) = (shape[0], shape[1], shape[2]);
                let mut ga = vec![0.0; p * s * c];
                for b in 0..p {
                    for i in 0..s {
                        for j in 0..s {
                            let src = ((b * s + i) * s + j) * c;
                            for k in 0..c {
                                ga[(b * s + i) * c + k] += gd[src + k];
                                ga[(b * s + j) * c + k] -= gd[src + k];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::MaskedFill { a, mask } => {
                let ga = gd.iter().zip(mask).map(|(&gi, &m)| if m { 0.0 } else { gi }).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Im2Col3(a) => {
                let shape = self.shape(*a);
                let (p, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                let mut ga = vec![0.0; p * h * w * c];
                for b in 0..p {
                    for y in 0..h {
                        for x in 0..w {
                            let src = ((b * h + y) * w + x) * 9 * c;
                            for (k, (dy, dx)) in KERNEL3.iter().enumerate() {
                                let (sy, sx) = (y as isize + dy, x as isize + dx);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                                for ch in 0..c {
                                    ga[dst + ch] += gd[src + k * c + ch];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Upsample2(a) => {
                let shape = self.shape(*a);
                let (p, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                let (h2, w2) = (2 * h, 2 * w);
                let mut ga = vec![0.0; p * h * w * c];
                for b in 0..p {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            let src = ((b * h2 + y) * w2 + x) * c;
                            let dst = ((b * h + y / 2) * w + x / 2) * c;
                            for ch in 0..c {
                                ga[dst + ch] += gd[src + ch];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
        }
        Ok(())
    }

    fn elementwise(&self, a: Var, gd: &[f64], y: &[f64], grads: &mut [Option<Tensor>], dy: impl Fn(usize, f64) -> f64) {
        let ga = gd
            .iter()
            .zip(y)
            .enumerate()
            .map(|(i, (gi, &yi))| gi * dy(i, yi))
            .collect();
        self.accumulate(grads, a, self.like(a, ga));
    }

    /// Folds a full-size gradient back onto a (possibly broadcast) operand.
    fn reduce_to(&self, b: Var, gd: &[f64], f: impl Fn(usize, f64) -> f64) -> Tensor {
        let nb = self.value(b).numel();
        let mut out = vec![0.0; nb];
        for (i, &gi) in gd.iter().enumerate() {
            out[i % nb] += f(i, gi);
        }
        self.like(b, out)
    }

    fn matmul_backward(&self, a: Var, b: Var, trans_b: bool, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
        let batch = numel(&sa[..sa.len() - 2]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let shared = sb.len() == 2;
        if self.requires_grad(a) {
            let mut ga = vec![0.0; av.len()];
            if shared {
                gemm(batch * m, n, k, gd, false, bv, !trans_b, &mut ga, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        !trans_b,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
            }
            self.accumulate(grads, a, self.like(a, ga));
        }
        if self.requires_grad(b) {
            let mut gb = vec![0.0; bv.len()];
            let rows = if shared { batch * m } else { m };
            let reps = if shared { 1 } else { batch };
            for i in 0..reps {
                let a_blk = &av[i * rows * k..(i + 1) * rows * k];
                let g_blk = &gd[i * rows * n..(i + 1) * rows * n];
                let b_blk = &mut gb[i * k * n..(i + 1) * k * n];
                if trans_b {
                    // b stored n×k: db = dCᵀ · A
                    gemm(n, rows, k, g_blk, true, a_blk, false, b_blk, false);
                } else {
                    // b stored k×n: db = Aᵀ · dC
                    gemm(k, rows, n, a_blk, true, g_blk, false, b_blk, false);
                }
            }
            self.accumulate(grads, b, self.like(b, gb));
        }
    }
}

const KERNEL3: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn transpose_last2(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let blk = m * n;
    if blk == 0 {
        return out;
    }
    for (src, dst) in x.chunks(blk).zip(out.chunks_mut(blk)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Swaps axes 1 and 2 of a rank-4 array with the given (input) shape.
fn swap12(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (p, q, r, s) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; x.len()];
    for a in 0..p {
        for b in 0..q {
            for c in 0..r {
                let src = ((a * q + b) * r + c) * s;
                let dst = ((a * r + c) * q + b) * s;
                out[dst..dst + s].copy_from_slice(&x[src..src + s]);
            }
        }
    }
    out
}

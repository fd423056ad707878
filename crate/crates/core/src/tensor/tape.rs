//! Wengert-list tape for reverse-mode differentiation.
//!
//! Each op appends a node holding its forward value and enough context to
//! produce input gradients. Nodes only reference earlier nodes, so a single
//! reverse sweep visits everything in topological order.

use super::kernels::{self, NormCache};
use super::{broadcast_binary, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable op defined outside the tape. The forward value is computed
/// by the caller; the tape only needs the vector-Jacobian product.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaskMul(Var, Tensor),
    L2Normalize(Var, Vec<f64>),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One tape per training step; confined to a single thread of execution.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Accumulated leaf gradients detached from a tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let v = broadcast_binary(self.value(a), self.value(b), name, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, op(a, b), rg))
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(TensorError::NumericDomain {
                op: "div",
                detail: format!("zero divisor at element {i}"),
            });
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t * c);
        self.unary(x, v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t + c);
        self.unary(x, v, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| if t > 0.0 { t } else { 0.0 });
        self.unary(x, v, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        self.unary(x, v, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        if !v.all_finite() {
            return Err(TensorError::NumericDomain {
                op: "exp",
                detail: "overflow".into(),
            });
        }
        Ok(self.unary(x, v, Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&t| t <= 0.0 || t.is_nan()) {
            return Err(TensorError::NumericDomain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        let v = self.value(x).map(f64::ln);
        Ok(self.unary(x, v, Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&t| t <= 0.0 || t.is_nan()) {
            return Err(TensorError::NumericDomain {
                op: "sqrt",
                detail: format!("non-positive argument {bad}"),
            });
        }
        let v = self.value(x).map(f64::sqrt);
        Ok(self.unary(x, v, Op::Sqrt(x)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, dropping it (a 1-D input yields `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                detail: format!("axis {axis} for shape {:?}", t.shape()),
            });
        }
        let shape = t.shape();
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &t.data()[(o * dim + d) * inner..][..inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.to_vec();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let v = Tensor::new(&new_shape, out)?;
        Ok(self.unary(x, v, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(perm)?;
        Ok(self.unary(x, v, Op::Permute(x, perm.to_vec())))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).ndim();
        if n < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                detail: "needs at least 2 axes".into(),
            });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(x, &perm)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).broadcast_to(shape)?;
        Ok(self.unary(x, v, Op::BroadcastTo(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.unary(x, v, Op::Narrow(x, axis, start)))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = kernels::softmax_last(self.value(x));
        self.unary(x, v, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let lse = kernels::logsumexp_last(t);
        let mut v = t.clone();
        for (row, l) in v.data_mut().chunks_exact_mut(d).zip(lse.data()) {
            for e in row {
                *e -= l;
            }
        }
        self.unary(x, v, Op::LogSoftmax(x))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (v, cache) = kernels::layernorm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    /// Batch normalization over `[B,C,H,W]` with explicit statistics.
    /// `batch_stats` marks `mean`/`var` as functions of `x` (training mode).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let (v, cache) =
            kernels::batchnorm_apply(self.value(x), mean, var, self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Multiply by a constant tensor of identical shape (dropout, masks).
    pub fn mask_mul(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        if mask.shape() != self.shape(x) {
            return Err(TensorError::ShapeMismatch {
                op: "mask_mul",
                lhs: self.shape(x).to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let v = broadcast_binary(self.value(x), &mask, "mask_mul", |a, m| a * m)?;
        Ok(self.unary(x, v, Op::MaskMul(x, mask)))
    }

    /// Divide each row (last axis) by its L2 norm. Zero rows are rejected;
    /// non-finite rows propagate NaN so callers see a non-finite loss.
    pub fn l2_normalize(&mut self, x: Var, op: &'static str) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut v = t.clone();
        let mut norms = Vec::with_capacity(t.len() / d);
        for (r, row) in v.data_mut().chunks_exact_mut(d).enumerate() {
            let n = row.iter().map(|e| e * e).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::Degenerate { op, row: r });
            }
            for e in row.iter_mut() {
                *e /= n;
            }
            norms.push(n);
        }
        Ok(self.unary(x, v, Op::L2Normalize(x, norms)))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Var {
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(value, Op::Custom(op, inputs.to_vec()), rg)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn gradients(&self) -> Gradients {
        Gradients {
            grads: self.grads.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Accumulate ∂loss/∂leaf into every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut work: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.grads[i], g)?;
                continue;
            }
            for (input, gi) in self.input_grads(i, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut work[input.0], gi)?;
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        let reduce = |t: Tensor, v: Var| t.sum_to_shape(val(v).shape());
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, reduce(g.clone(), *a)?));
                res.push((*b, reduce(g.clone(), *b)?));
            }
            Op::Sub(a, b) => {
                res.push((*a, reduce(g.clone(), *a)?));
                res.push((*b, reduce(g.map(|x| -x), *b)?));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let t = broadcast_binary(g, val(*b), "mul grad", |x, y| x * y)?;
                    res.push((*a, reduce(t, *a)?));
                }
                if self.rg(*b) {
                    let t = broadcast_binary(g, val(*a), "mul grad", |x, y| x * y)?;
                    res.push((*b, reduce(t, *b)?));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    let t = broadcast_binary(g, val(*b), "div grad", |x, y| x / y)?;
                    res.push((*a, reduce(t, *a)?));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out/b
                    let q = broadcast_binary(out, val(*b), "div grad", |o, y| -o / y)?;
                    let t = broadcast_binary(g, &q, "div grad", |x, y| x * y)?;
                    res.push((*b, reduce(t, *b)?));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.map(|v| v * c))),
            Op::AddScalar(x) | Op::Reshape(x) => {
                res.push((*x, g.clone().reshape(val(*x).shape())?));
            }
            Op::Relu(x) => {
                res.push((*x, g.zip_with(val(*x), |d, t| if t > 0.0 { d } else { 0.0 })?));
            }
            Op::Gelu(x) => res.push((*x, g.zip_with(val(*x), |d, t| d * kernels::gelu_grad(t))?)),
            Op::Exp(x) => res.push((*x, g.zip_with(out, |d, y| d * y)?)),
            Op::Log(x) => res.push((*x, g.zip_with(val(*x), |d, t| d / t)?)),
            Op::Sqrt(x) => res.push((*x, g.zip_with(out, |d, y| d * 0.5 / y)?)),
            Op::Sum(x) => res.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::SumAxis(x, axis) => {
                let shape = val(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let dim = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut t = Tensor::zeros(shape);
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        t.data_mut()[(o * dim + d) * inner..][..inner].copy_from_slice(src);
                    }
                }
                res.push((*x, t));
            }
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), g, self.rg(*a), self.rg(*b))?;
                res.extend(da.map(|t| (*a, t)));
                res.extend(db.map(|t| (*b, t)));
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                res.push((*x, g.permute(&inv)?));
            }
            Op::BroadcastTo(x) => res.push((*x, reduce(g.clone(), *x)?)),
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if self.rg(p) {
                        res.push((p, g.narrow(*axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Narrow(x, axis, start) => {
                let src = val(*x).shape();
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let (dim, len) = (src[*axis], g.shape()[*axis]);
                let mut t = Tensor::zeros(src);
                for o in 0..outer {
                    let from = &g.data()[o * len * inner..(o + 1) * len * inner];
                    t.data_mut()[(o * dim + start) * inner..][..len * inner].copy_from_slice(from);
                }
                res.push((*x, t));
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut t = g.clone();
                for (row, y) in t.data_mut().chunks_exact_mut(d).zip(out.data().chunks_exact(d)) {
                    let dot: f64 = row.iter().zip(y).map(|(a, b)| a * b).sum();
                    for (r, yv) in row.iter_mut().zip(y) {
                        *r = yv * (*r - dot);
                    }
                }
                res.push((*x, t));
            }
            Op::LogSoftmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut t = g.clone();
                for (row, y) in t.data_mut().chunks_exact_mut(d).zip(out.data().chunks_exact(d)) {
                    let s: f64 = row.iter().sum();
                    for (r, ly) in row.iter_mut().zip(y) {
                        *r -= ly.exp() * s;
                    }
                }
                res.push((*x, t));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = kernels::layernorm_backward(cache, val(*gamma), g);
                res.push((*x, dx));
                res.push((*gamma, dg));
                res.push((*beta, db));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                batch_stats,
            } => {
                let (dx, dg, db) = kernels::batchnorm_backward(cache, val(*gamma), g, *batch_stats);
                res.push((*x, dx));
                res.push((*gamma, dg));
                res.push((*beta, db));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, self.rg(*x))?;
                res.extend(dx.map(|t| (*x, t)));
                res.push((*w, dw));
                if let Some(b) = b {
                    res.push((*b, db));
                }
            }
            Op::MaskMul(x, mask) => res.push((*x, g.zip_with(mask, |d, m| d * m)?)),
            Op::L2Normalize(x, norms) => {
                let d = *out.shape().last().unwrap();
                let mut t = g.clone();
                for ((row, y), n) in t
                    .data_mut()
                    .chunks_exact_mut(d)
                    .zip(out.data().chunks_exact(d))
                    .zip(norms)
                {
                    let dot: f64 = row.iter().zip(y).map(|(a, b)| a * b).sum();
                    for (r, yv) in row.iter_mut().zip(y) {
                        *r = (*r - yv * dot) / n;
                    }
                }
                res.push((*x, t));
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&ins, out, g)?;
                for (&v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if gi.shape() != val(v).shape() {
                            return Err(TensorError::ShapeMismatch {
                                op: op.name(),
                                lhs: val(v).shape().to_vec(),
                                rhs: gi.shape().to_vec(),
                            });
                        }
                        res.push((v, gi));
                    }
                }
            }
        }
        Ok(res)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "grad accumulate",
                    lhs: acc.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_vectors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4., 6.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2]"));
    }

    #[test]
    fn annihilator_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., -2., 5.]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.mul(x, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.; 3]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1., 0., 2.]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn log_of_negative_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.log(x), Err(TensorError::NumericDomain { .. })));
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[5., 6., 7., 8.]);
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
        let bad = tape.constant(t(&[3, 1], &[1., 1., 1.]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn sum_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., 2., 3.]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 2.]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn conv_of_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
        let x4 = tape.constant(Tensor::ones(&[1, 4, 4]));
        let w3 = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x4, w3, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
    }

    #[test]
    fn layernorm_closed_forms() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1., 3.]));
        let y = tape.layernorm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1., 1.]);
        let gc = tape.constant(Tensor::ones(&[4]));
        let bc = tape.constant(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::full(&[3, 4], 7.5));
        let y = tape.layernorm(c, gc, bc, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_and_logsumexp_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let s = tape.softmax(x);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let lse = kernels::logsumexp_last(&t(&[2], &[1000., 1000.]));
        assert!((lse.item() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let x = tape.constant(t(&[2], &[19.5, -30.0]));
        let s = tape.softmax(x);
        let p = tape.value(s).data();
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(((p[1] / (-49.5f64).exp()) - 1.0).abs() < 1e-12);
    }
}

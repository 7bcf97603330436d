use std::borrow::Cow;

use super::{broadcast_offsets, broadcast_shape, split_axis, Tensor};
use crate::error::{AmdError, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Softplus,
    Ln,
    Exp,
    Gelu,
    Sqrt,
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { x: Var, factor: F },
    Shift { x: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    VarAxis { x: Var, axis: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    Softmax { x: Var },
    Unary { kind: UnaryKind, x: Var },
    AvgPool { x: Var, rate: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Gather { x: Var, idx: Vec<usize> },
}

struct Node<'a, F: Scalar> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Define-by-run record of primitive applications.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// Leaves may borrow their values (parameters) for the lifetime `'a`.
pub struct Graph<'a, F: Scalar> {
    nodes: Vec<Node<'a, F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_COEF: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + F::of(GELU_COEF) * x * x * x);
    F::of(0.5) * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(GELU_COEF);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: impl Into<Cow<'a, Tensor<F>>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, value: &'a Tensor<F>) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].grad.take()
    }

    // ---- linear algebra -------------------------------------------------

    /// `a @ b` with `a: [.., M, K]` and `b: [K, N]` (shared) or `[.., K, N]`
    /// (same leading dims as `a`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(AmdError::shape(format!("matmul needs 2+ dims, got {sa:?} @ {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(AmdError::shape(format!("matmul inner dims differ: {sa:?} @ {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![F::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if sb.len() == 2 {
            F::gemm(batch * m, k, n, F::one(), ad, (k as isize, 1), bd, (n as isize, 1), F::zero(), &mut out, (n as isize, 1));
        } else {
            if sb[..sb.len() - 2] != sa[..sa.len() - 2] {
                return Err(AmdError::shape(format!("matmul batch dims differ: {sa:?} @ {sb:?}")));
            }
            for i in 0..batch {
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    &ad[i * m * k..],
                    (k as isize, 1),
                    &bd[i * k * n..],
                    (n as isize, 1),
                    F::zero(),
                    &mut out[i * m * n..],
                    (n as isize, 1),
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let oa = broadcast_offsets(&shape, ta.shape());
        let ob = broadcast_offsets(&shape, tb.shape());
        let total: usize = shape.iter().product();
        let (ad, bd) = (ta.data(), tb.data());
        let data = (0..total)
            .map(|i| {
                let x = ad[oa.as_ref().map_or(i, |o| o[i])];
                let y = bd[ob.as_ref().map_or(i, |o| o[i])];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Adds a scalar constant.
    pub fn shift(&mut self, x: Var, offset: F) -> Var {
        let value = self.value(x).map(|v| v + offset);
        self.push(value, Op::Shift { x }, &[x])
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Softplus => softplus(v),
            UnaryKind::Ln => v.ln(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Gelu => gelu(v),
            UnaryKind::Sqrt => v.sqrt(),
        });
        self.push(value, Op::Unary { kind, x }, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    // ---- layout ---------------------------------------------------------

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose_last()?;
        Ok(self.push(value, Op::Transpose { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AmdError::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            if !same_rank || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(AmdError::shape(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total_axis += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if start >= end || end > n {
            return Err(AmdError::shape(format!(
                "slice {start}..{end} out of range for axis {axis} of {shape:?}"
            )));
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Picks `idx[r, j]` from row `r` of the last axis. `idx` is laid out as
    /// `[rows, k]`; indices are constants and receive no gradient.
    pub fn gather(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| AmdError::shape("gather on a scalar"))?;
        let rows = self.value(x).len() / n.max(1);
        if idx.len() != rows * k {
            return Err(AmdError::shape(format!(
                "gather expects {} indices for {rows} rows x {k}, got {}",
                rows * k,
                idx.len()
            )));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(AmdError::shape(format!("gather index {bad} out of range {n}")));
        }
        let src = self.value(x).data();
        let data = idx
            .iter()
            .enumerate()
            .map(|(p, &i)| src[(p / k) * n + i])
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = k;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    // ---- reductions -----------------------------------------------------

    fn reduce_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<(Vec<usize>, Vec<F>, usize)> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let src = self.value(x).data();
        let mut sums = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (s, &v) in sums[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        Ok((reduced_shape(&shape, axis, keepdim), sums, n))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let (shape, sums, _) = self.reduce_axis(x, axis, keepdim)?;
        let value = Tensor::new(shape, sums)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let (shape, sums, n) = self.reduce_axis(x, axis, keepdim)?;
        let inv = F::one() / F::of(n as f64);
        let value = Tensor::new(shape, sums.into_iter().map(|s| s * inv).collect())?;
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Population variance along `axis`.
    pub fn var_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let src = self.value(x).data();
        let nf = F::of(n as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| src[(o * n + j) * inner + i];
                let mean = (0..n).map(at).sum::<F>() / nf;
                out[o * inner + i] = (0..n).map(|j| (at(j) - mean).powi(2)).sum::<F>() / nf;
            }
        }
        let value = Tensor::new(reduced_shape(&shape, axis, keepdim), out)?;
        Ok(self.push(value, Op::VarAxis { x, axis }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, &[x])
    }

    // ---- composite primitives -------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| AmdError::shape("softmax on a scalar"))?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Average pooling over the last axis with kernel = stride = `rate`;
    /// trailing `len % rate` entries are dropped.
    pub fn avg_pool(&mut self, x: Var, rate: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| AmdError::shape("avg_pool on a scalar"))?;
        if rate == 0 || n < rate {
            return Err(AmdError::shape(format!(
                "avg_pool needs length >= rate, got length {n}, rate {rate}"
            )));
        }
        let out_len = n / rate;
        let inv = F::one() / F::of(rate as f64);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() / n * out_len);
        for row in src.chunks(n) {
            for b in 0..out_len {
                data.push(row[b * rate..(b + 1) * rate].iter().copied().sum::<F>() * inv);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::AvgPool { x, rate }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| AmdError::shape("layer_norm on a scalar"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(AmdError::shape(format!(
                "layer_norm affine must be [{n}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let nf = F::of(n as f64);
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(src.len() / n);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Populates `grad` on every reachable leaf that requires it.
    ///
    /// Each recorded node is visited once, newest first. A graph can be
    /// differentiated only once.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(AmdError::GraphConsumed);
        }
        let out_len = self.nodes[output.0].value.len();
        if out_len != 1 {
            return Err(AmdError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        self.consumed = true;
        let shape = self.nodes[output.0].value.shape().to_vec();
        self.nodes[output.0].grad = Some(Tensor::ones(&shape));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (v, contrib) in self.node_backward(i, &g)? {
                let node = &mut self.nodes[v.0];
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    None => node.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let shared = sb.len() == 2;
                if self.wants(*a) {
                    let mut ga = vec![F::zero(); ta.len()];
                    if shared {
                        // dA = dC @ B^T
                        F::gemm(batch * m, n, k, F::one(), gd, (n as isize, 1), tb.data(), (1, n as isize), F::zero(), &mut ga, (k as isize, 1));
                    } else {
                        for bi in 0..batch {
                            F::gemm(m, n, k, F::one(), &gd[bi * m * n..], (n as isize, 1), &tb.data()[bi * k * n..], (1, n as isize), F::zero(), &mut ga[bi * m * k..], (k as isize, 1));
                        }
                    }
                    out.push((*a, Tensor::new(sa.to_vec(), ga)?));
                }
                if self.wants(*b) {
                    let mut gb = vec![F::zero(); tb.len()];
                    if shared {
                        // dB = A^T @ dC, summed over the batch
                        F::gemm(k, batch * m, n, F::one(), ta.data(), (1, k as isize), gd, (n as isize, 1), F::zero(), &mut gb, (n as isize, 1));
                    } else {
                        for bi in 0..batch {
                            F::gemm(k, m, n, F::one(), &ta.data()[bi * m * k..], (1, k as isize), &gd[bi * m * n..], (n as isize, 1), F::zero(), &mut gb[bi * k * n..], (n as isize, 1));
                        }
                    }
                    out.push((*b, Tensor::new(sb.to_vec(), gb)?));
                }
            }
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let shape = node.value.shape();
                let oa = broadcast_offsets(shape, ta.shape());
                let ob = broadcast_offsets(shape, tb.shape());
                let (wa, wb) = (self.wants(*a), self.wants(*b));
                let mut ga = vec![F::zero(); if wa { ta.len() } else { 0 }];
                let mut gb = vec![F::zero(); if wb { tb.len() } else { 0 }];
                let (ad, bd) = (ta.data(), tb.data());
                for (p, &go) in gd.iter().enumerate() {
                    let ia = oa.as_ref().map_or(p, |o| o[p]);
                    let ib = ob.as_ref().map_or(p, |o| o[p]);
                    let (da, db) = match kind {
                        BinaryKind::Add => (go, go),
                        BinaryKind::Sub => (go, -go),
                        BinaryKind::Mul => (go * bd[ib], go * ad[ia]),
                        BinaryKind::Div => (go / bd[ib], -go * ad[ia] / (bd[ib] * bd[ib])),
                    };
                    if wa {
                        ga[ia] += da;
                    }
                    if wb {
                        gb[ib] += db;
                    }
                }
                if wa {
                    out.push((*a, Tensor::new(ta.shape().to_vec(), ga)?));
                }
                if wb {
                    out.push((*b, Tensor::new(tb.shape().to_vec(), gb)?));
                }
            }
            Op::Scale { x, factor } => out.push((*x, g.map(|v| v * *factor))),
            Op::Shift { x } => out.push((*x, g.clone())),
            Op::Transpose { x } => out.push((*x, g.transpose_last()?)),
            Op::Reshape { x } => out.push((*x, g.clone().reshape(self.shape(*x))?)),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis)?;
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        out.push((p, Tensor::new(self.shape(p).to_vec(), data)?));
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis)?;
                let w = g.shape()[*axis];
                let mut data = vec![F::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    data[dst..dst + w * inner].copy_from_slice(&gd[o * w * inner..(o + 1) * w * inner]);
                }
                out.push((*x, Tensor::new(shape, data)?));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis)?;
                let scale = match node.op {
                    Op::MeanAxis { .. } => F::one() / F::of(n as f64),
                    _ => F::one(),
                };
                let mut data = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        data.extend(gd[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                    }
                }
                out.push((*x, Tensor::new(shape, data)?));
            }
            Op::VarAxis { x, axis } => {
                let tx = self.value(*x);
                let (outer, n, inner) = split_axis(tx.shape(), *axis)?;
                let nf = F::of(n as f64);
                let src = tx.data();
                let mut data = vec![F::zero(); tx.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mean = (0..n).map(|j| src[at(j)]).sum::<F>() / nf;
                        let go = gd[o * inner + i];
                        for j in 0..n {
                            data[at(j)] = go * F::of(2.0) * (src[at(j)] - mean) / nf;
                        }
                    }
                }
                out.push((*x, Tensor::new(tx.shape().to_vec(), data)?));
            }
            Op::SumAll { x } => out.push((*x, Tensor::full(self.shape(*x), gd[0]))),
            Op::MeanAll { x } => {
                let len = self.value(*x).len();
                out.push((*x, Tensor::full(self.shape(*x), gd[0] / F::of(len as f64))));
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut data = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(gd.chunks(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                out.push((*x, Tensor::new(node.value.shape().to_vec(), data)?));
            }
            Op::Unary { kind, x } => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let data = gd
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&go, (&xv, &yv))| {
                        go * match kind {
                            UnaryKind::Softplus => sigmoid(xv),
                            UnaryKind::Ln => F::one() / xv,
                            UnaryKind::Exp => yv,
                            UnaryKind::Gelu => gelu_grad(xv),
                            UnaryKind::Sqrt => F::of(0.5) / yv,
                        }
                    })
                    .collect();
                out.push((*x, Tensor::new(self.shape(*x).to_vec(), data)?));
            }
            Op::AvgPool { x, rate } => {
                let shape = self.shape(*x).to_vec();
                let n = *shape.last().unwrap();
                let out_len = n / rate;
                let inv = F::one() / F::of(*rate as f64);
                let rows = self.value(*x).len() / n;
                let mut data = vec![F::zero(); rows * n];
                for r in 0..rows {
                    for bk in 0..out_len {
                        let go = gd[r * out_len + bk] * inv;
                        for v in &mut data[r * n + bk * rate..r * n + (bk + 1) * rate] {
                            *v = go;
                        }
                    }
                }
                out.push((*x, Tensor::new(shape, data)?));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![F::zero(); n];
                    let mut gb = vec![F::zero(); n];
                    for (gr, hr) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                    }
                    if self.wants(*gamma) {
                        out.push((*gamma, Tensor::new(vec![n], gg)?));
                    }
                    if self.wants(*beta) {
                        out.push((*beta, Tensor::new(vec![n], gb)?));
                    }
                }
                if self.wants(*x) {
                    let nf = F::of(n as f64);
                    let mut data = Vec::with_capacity(gd.len());
                    for ((gr, hr), &is) in gd.chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                        let gh: Vec<F> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let sum_gh: F = gh.iter().copied().sum();
                        let sum_ghh: F = gh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        data.extend(
                            gh.iter()
                                .zip(hr)
                                .map(|(&a, &h)| is / nf * (nf * a - sum_gh - h * sum_ghh)),
                        );
                    }
                    out.push((*x, Tensor::new(self.shape(*x).to_vec(), data)?));
                }
            }
            Op::Gather { x, idx } => {
                let shape = self.shape(*x).to_vec();
                let n = *shape.last().unwrap();
                let k = *g.shape().last().unwrap();
                let mut data = vec![F::zero(); self.value(*x).len()];
                for (p, &i) in idx.iter().enumerate() {
                    data[(p / k) * n + i] += gd[p];
                }
                out.push((*x, Tensor::new(shape, data)?));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[], &[2.0]), true);
        let y = g.leaf(t(&[], &[3.0]), true);
        let f = g.mul(x, y).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[], &[3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let f = g.add(sq, x).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[0.3, -1.0, 2.0, 0.5]), true);
        let s = g.softmax(x).unwrap();
        let f = g.sum_all(s);
        g.backward(f).unwrap();
        for v in g.grad(x).unwrap().data() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(AmdError::Contract(_))));
        let f = g.sum_all(y);
        g.backward(f).unwrap();
        assert!(matches!(g.backward(f), Err(AmdError::GraphConsumed)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = g.constant(t(&[2], &[5.0, 6.0]));
        let p = g.mul(x, c).unwrap();
        let f = g.sum_all(p);
        g.backward(f).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[5.0, 6.0]);
    }

    #[test]
    fn avg_pool_truncates() {
        let mut g = Graph::new();
        let x = g.constant(t(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let p = g.avg_pool(x, 2).unwrap();
        assert_eq!(g.value(p).data(), &[1.5, 3.5]);
        let x = g.constant(t(&[1], &[1.0]));
        assert!(g.avg_pool(x, 2).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[0.0; 6]), true);
        let b = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = g.add(x, b).unwrap();
        let f = g.sum_all(y);
        g.backward(f).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn gather_and_slice_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let gth = g.gather(x, &[2, 0, 1, 1], 2).unwrap();
        assert_eq!(g.value(gth).data(), &[3.0, 1.0, 5.0, 5.0]);
        let s = g.slice(x, 1, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 3.0, 5.0, 6.0]);
        let c = g.concat(&[s, x], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        assert_eq!(g.value(c).data()[..5], [2.0, 3.0, 1.0, 2.0, 3.0]);
    }
}

//! Eager computation graph with reverse-mode differentiation.
//!
//! Every op computes its value immediately and records enough to run the
//! chain rule later. Parameters are borrowed from a [`ParamStore`] and
//! their gradients come back as a [`Gradients`] map, so several graphs can
//! share one store across threads.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{shape_err, Gradients, ParamStore, Real, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

enum Op<F> {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Square(Var),
    ScaleBy { scalar: Var, x: Var },
    Gelu { x: Var, deriv: Vec<F> },
    LayerNorm { x: Var, gain: Var, shift: Var, stats: Vec<(F, F)> },
    SoftmaxRows { x: Var, bias: Option<Var> },
    Attention { q: Var, k: Var, v: Var, bias: Option<Var>, heads: usize, probs: Vec<F> },
    GatherRows { table: Var, ids: Vec<usize> },
    MeanSquaredRowError { pred: Var, target: Tensor<F> },
    Sum(Var),
}

struct Node<'a, F: Real> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
}

/// Per-head attention probabilities recorded by [`Graph::attention`].
#[derive(Debug, Clone)]
pub struct AttentionWeights<F = f32> {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// `heads × queries × keys`, row-major.
    pub probs: Vec<F>,
}

impl<F: Real> AttentionWeights<F> {
    pub fn get(&self, head: usize, query: usize, key: usize) -> F {
        self.probs[(head * self.queries + query) * self.keys + key]
    }
}

pub struct Graph<'a, F: Real = f32> {
    id: u64,
    params: &'a ParamStore<F>,
    nodes: Vec<Node<'a, F>>,
    param_vars: HashMap<String, Var>,
}

/// Tanh-approximated GELU over a slice; returns values and derivatives.
/// `tanh(z)` is evaluated as `1 − 2 / (exp(2z) + 1)`.
fn gelu_slice<F: Real>(xs: &[F]) -> (Vec<F>, Vec<F>) {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    let (one, two, three) = (F::one(), F::from_f64_lossy(2.0), F::from_f64_lossy(3.0));
    let mut e: Vec<F> = xs.iter().map(|&x| two * c * (x + a * x * x * x)).collect();
    F::exp_in_place(&mut e);
    let mut y = Vec::with_capacity(xs.len());
    let mut dy = Vec::with_capacity(xs.len());
    for (&x, &ez) in xs.iter().zip(&e) {
        let t = one - two / (ez + one);
        y.push(half * x * (one + t));
        dy.push(half * (one + t) + half * x * (one - t * t) * c * (one + three * a * x * x));
    }
    (y, dy)
}

// Eight independent accumulators let the reductions vectorize.
fn lane_sum<F: Real>(xs: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rest: F = chunks.remainder().iter().copied().sum();
    for c in chunks {
        for i in 0..8 {
            acc[i] = acc[i] + c[i];
        }
    }
    acc.iter().copied().sum::<F>() + rest
}

fn lane_max<F: Real>(xs: &[F]) -> F {
    let mut acc = [F::neg_infinity(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder().iter().copied().fold(F::neg_infinity(), F::max);
    for c in chunks {
        for i in 0..8 {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    acc.iter().copied().fold(rest, F::max)
}

fn lane_dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let rest: F = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<F>() + rest
}

/// Numerically stable in-place softmax of one row.
fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = lane_max(row);
    row.iter_mut().for_each(|v| *v = *v - max);
    F::exp_in_place(row);
    let inv = F::one() / lane_sum(row);
    row.iter_mut().for_each(|v| *v = *v * inv);
}

impl<'a, F: Real> Graph<'a, F> {
    pub fn new(params: &'a ParamStore<F>) -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'a ParamStore<F> {
        self.params
    }

    fn push(&mut self, value: Cow<'a, Tensor<F>>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn node(&self, v: Var) -> &Node<'a, F> {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.node(v).value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Probabilities recorded by an attention node, if `v` is one.
    pub fn attention_weights(&self, v: Var) -> Option<AttentionWeights<F>> {
        match &self.node(v).op {
            Op::Attention { q, k, heads, probs, .. } => Some(AttentionWeights {
                heads: *heads,
                queries: self.value(*q).shape()[0],
                keys: self.value(*k).shape()[0],
                probs: probs.clone(),
            }),
            _ => None,
        }
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Cow::Owned(value), Op::Constant)
    }

    /// Leaf for a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.push(Cow::Borrowed(value), Op::Param(name.to_string()));
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b)))
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (_, cols) = self.value(x).dims2()?;
        let bias = self.value(b);
        if bias.numel() != cols {
            return Err(shape_err("add_row_bias", format!("{cols} columns vs bias of {}", bias.numel())));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o = *o + bv;
            }
        }
        Ok(self.push(Cow::Owned(out), Op::AddRowBias(x, b)))
    }

    /// Affine map `x·W + b` applied row-wise.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let h = self.matmul(x, weight)?;
        self.add_row_bias(h, bias)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(Cow::Owned(out), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(Cow::Owned(out), Op::Square(x))
    }

    /// Multiplies every entry of `x` by the single-element tensor `scalar`.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> Result<Var, TensorError> {
        let s = self.value(scalar);
        if s.numel() != 1 {
            return Err(shape_err("scale_by", format!("scalar has {} elements", s.numel())));
        }
        let s = s.data()[0];
        let out = self.value(x).map(|v| s * v);
        Ok(self.push(Cow::Owned(out), Op::ScaleBy { scalar, x }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (y, deriv) = gelu_slice(xv.data());
        let out = Tensor::new(xv.shape().to_vec(), y).expect("same element count");
        self.push(Cow::Owned(out), Op::Gelu { x, deriv })
    }

    /// Row-wise normalization to zero mean and unit variance, then `gain`
    /// and `shift` per column.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gain).numel() != cols || self.value(shift).numel() != cols {
            return Err(shape_err("layer_norm", format!("{cols} columns vs gain/shift")));
        }
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let n = F::from_usize(cols).unwrap();
        let xv = self.value(x);
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut stats = Vec::with_capacity(rows);
        for (row_in, row_out) in xv.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
            let mean = row_in.iter().copied().sum::<F>() / n;
            let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rstd = F::one() / (var + eps).sqrt();
            for (i, o) in row_out.iter_mut().enumerate() {
                *o = (row_in[i] - mean) * rstd * g[i] + s[i];
            }
            stats.push((mean, rstd));
        }
        Ok(self.push(Cow::Owned(out), Op::LayerNorm { x, gain, shift, stats }))
    }

    /// Row-wise softmax of `x + bias`.
    pub fn softmax_rows(&mut self, x: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let (_, cols) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        if let Some(b) = bias {
            if self.value(b).shape() != out.shape() {
                return Err(shape_err("softmax_rows", "bias shape differs from logits"));
            }
            for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
                *o = *o + bv;
            }
        }
        if cols > 0 {
            out.data_mut().chunks_mut(cols).for_each(softmax_in_place);
        }
        Ok(self.push(Cow::Owned(out), Op::SoftmaxRows { x, bias }))
    }

    /// Multi-head scaled dot-product attention on already-projected
    /// `q [nq×d]`, `k [nk×d]`, `v [nk×d]`. The optional `bias [nq×nk]` is
    /// added to the logits of every head; the logit scale is `1/√(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, bias: Option<Var>) -> Result<Var, TensorError> {
        let (nq, d) = self.value(q).dims2()?;
        let (nk, dk) = self.value(k).dims2()?;
        let (nv, dv) = self.value(v).dims2()?;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if dk != d || dv != d || nv != nk {
            return Err(shape_err("attention", format!("q {nq}x{d}, k {nk}x{dk}, v {nv}x{dv}")));
        }
        if nk == 0 {
            return Err(shape_err("attention", "no keys"));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [nq, nk] {
                return Err(shape_err("attention", format!("bias {:?}, expected [{nq}, {nk}]", self.value(b).shape())));
            }
        }
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let bias_data = bias.map(|b| self.value(b).data());
        let ld = d as isize;
        let mut probs = vec![F::zero(); heads * nq * nk];
        let mut out = Tensor::zeros(&[nq, d]);
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            F::gemm(nq, dh, nk, &qd[off..], (ld, 1), &kd[off..], (1, ld), p, (nk as isize, 1), F::zero());
            match bias_data {
                Some(b) => p.iter_mut().zip(b).for_each(|(x, &bv)| *x = *x * scale + bv),
                None => p.iter_mut().for_each(|x| *x = *x * scale),
            }
            p.chunks_mut(nk).for_each(softmax_in_place);
            F::gemm(nq, nk, dh, p, (nk as isize, 1), &vd[off..], (ld, 1), &mut out.data_mut()[off..], (ld, 1), F::zero());
        }
        Ok(self.push(Cow::Owned(out), Op::Attention { q, k, v, bias, heads, probs }))
    }

    /// Attention with learned projections read from
    /// `{prefix}.{q,k,v,out}.{weight,bias}`. Returns the projected output and
    /// the raw attention node (for [`Graph::attention_weights`]).
    pub fn multi_head_attention(
        &mut self,
        prefix: &str,
        queries: Var,
        keys: Var,
        values: Var,
        heads: usize,
        bias: Option<Var>,
    ) -> Result<(Var, Var), TensorError> {
        let project = |g: &mut Self, x: Var, which: &str| -> Result<Var, TensorError> {
            let w = g.param(&format!("{prefix}.{which}.weight"))?;
            let b = g.param(&format!("{prefix}.{which}.bias"))?;
            g.linear(x, w, b)
        };
        let q = project(self, queries, "q")?;
        let k = project(self, keys, "k")?;
        let v = project(self, values, "v")?;
        let attn = self.attention(q, k, v, heads, bias)?;
        let out = project(self, attn, "out")?;
        Ok((out, attn))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(Cow::Owned(out), Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// Mean over rows of the squared Euclidean row distance to `target`.
    pub fn mean_squared_row_error(&mut self, pred: Var, target: Tensor<F>) -> Result<Var, TensorError> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err("mean_squared_row_error", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        let (rows, _) = p.dims2()?;
        // accumulate in f64 so the f32 loss is correctly rounded
        let total: f64 = p.data().iter().zip(target.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        let out = Tensor::scalar(F::from_f64_lossy(total / rows.max(1) as f64));
        Ok(self.push(Cow::Owned(out), Op::MeanSquaredRowError { pred, target }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Cow::Owned(Tensor::scalar(total)), Op::Sum(x))
    }

    /// Reverse pass from the single-element `loss`, returning parameter
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        if loss.graph != self.id || loss.index >= self.nodes.len() {
            return Err(TensorError::NoForward);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(shape_err("backward", format!("loss must be a scalar, got {:?}", lv.shape())));
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(lv.shape(), F::one()));
        let mut out = Gradients::new();

        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, t: Tensor<F>| match &mut grads[v.index] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => out.accumulate(name, g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2()?;
                    let (_, n) = tb.dims2()?;
                    let mut ga = Tensor::zeros(&[m, k]);
                    F::gemm(m, n, k, g.data(), (n as isize, 1), tb.data(), (1, n as isize), ga.data_mut(), (k as isize, 1), F::zero());
                    let mut gb = Tensor::zeros(&[k, n]);
                    F::gemm(k, m, n, ta.data(), (1, k as isize), g.data(), (n as isize, 1), gb.data_mut(), (n as isize, 1), F::zero());
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::AddRowBias(x, b) => {
                    let cols = self.value(*b).numel();
                    let mut gb = vec![F::zero(); cols];
                    for row in g.data().chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(acc, &v)| *acc = *acc + v);
                    }
                    send(*b, Tensor::new(self.value(*b).shape().to_vec(), gb)?);
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Square(x) => {
                    let two = F::from_f64_lossy(2.0);
                    let data = g.data().iter().zip(self.value(*x).data()).map(|(&gv, &xv)| two * xv * gv).collect();
                    send(*x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::ScaleBy { scalar, x } => {
                    let s = self.value(*scalar).data()[0];
                    let gs: F = g.data().iter().zip(self.value(*x).data()).map(|(&gv, &xv)| gv * xv).sum();
                    send(*scalar, Tensor::new(self.value(*scalar).shape().to_vec(), vec![gs])?);
                    send(*x, g.map(|v| v * s));
                }
                Op::Gelu { x, deriv } => {
                    let data = g.data().iter().zip(deriv).map(|(&gv, &d)| gv * d).collect();
                    send(*x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::LayerNorm { x, gain, shift, stats } => {
                    let (rows, cols) = g.dims2()?;
                    let gn = self.value(*gain).data();
                    let xv = self.value(*x).data();
                    let n = F::from_usize(cols).unwrap();
                    let mut gx = Tensor::zeros(&[rows, cols]);
                    let mut gg = vec![F::zero(); cols];
                    let mut gs = vec![F::zero(); cols];
                    let mut dxhat = vec![F::zero(); cols];
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let grow = &g.data()[r * cols..(r + 1) * cols];
                        let xrow = &xv[r * cols..(r + 1) * cols];
                        let mut sum_d = F::zero();
                        let mut sum_dx = F::zero();
                        for i in 0..cols {
                            let xhat = (xrow[i] - mean) * rstd;
                            gg[i] = gg[i] + grow[i] * xhat;
                            gs[i] = gs[i] + grow[i];
                            dxhat[i] = grow[i] * gn[i];
                            sum_d = sum_d + dxhat[i];
                            sum_dx = sum_dx + dxhat[i] * xhat;
                        }
                        let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
                        let out_row = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            let xhat = (xrow[i] - mean) * rstd;
                            out_row[i] = rstd * (dxhat[i] - mean_d - xhat * mean_dx);
                        }
                    }
                    send(*gain, Tensor::new(self.value(*gain).shape().to_vec(), gg)?);
                    send(*shift, Tensor::new(self.value(*shift).shape().to_vec(), gs)?);
                    send(*x, gx);
                }
                Op::SoftmaxRows { x, bias } => {
                    let (_, cols) = g.dims2()?;
                    let y = node.value.data();
                    let mut dz = vec![F::zero(); y.len()];
                    for ((dzr, yr), gr) in dz.chunks_mut(cols).zip(y.chunks(cols)).zip(g.data().chunks(cols)) {
                        let dot = lane_dot(yr, gr);
                        for i in 0..cols {
                            dzr[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    let dz = Tensor::new(g.shape().to_vec(), dz)?;
                    if let Some(b) = bias {
                        send(*b, dz.clone());
                    }
                    send(*x, dz);
                }
                Op::Attention { q, k, v, bias, heads, probs } => {
                    let (nq, d) = self.value(*q).dims2()?;
                    let (nk, _) = self.value(*k).dims2()?;
                    let dh = d / heads;
                    let ld = d as isize;
                    let nki = nk as isize;
                    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
                    let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let mut gq = Tensor::zeros(&[nq, d]);
                    let mut gk = Tensor::zeros(&[nk, d]);
                    let mut gv = Tensor::zeros(&[nk, d]);
                    let mut gbias = bias.map(|_| Tensor::zeros(&[nq, nk]));
                    let mut ds = vec![F::zero(); nq * nk];
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                        // dV_h = Pᵀ dO_h
                        F::gemm(nk, nq, dh, p, (1, nki), &g.data()[off..], (ld, 1), &mut gv.data_mut()[off..], (ld, 1), F::zero());
                        // dP = dO_h V_hᵀ
                        F::gemm(nq, dh, nk, &g.data()[off..], (ld, 1), &vd[off..], (1, ld), &mut ds, (nki, 1), F::zero());
                        for (dsr, pr) in ds.chunks_mut(nk).zip(p.chunks(nk)) {
                            let dot = lane_dot(dsr, pr);
                            for (x, &pv) in dsr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot);
                            }
                        }
                        if let Some(gb) = gbias.as_mut() {
                            gb.data_mut().iter_mut().zip(&ds).for_each(|(acc, &v)| *acc = *acc + v);
                        }
                        ds.iter_mut().for_each(|x| *x = *x * scale);
                        F::gemm(nq, nk, dh, &ds, (nki, 1), &kd[off..], (ld, 1), &mut gq.data_mut()[off..], (ld, 1), F::zero());
                        F::gemm(nk, nq, dh, &ds, (1, nki), &qd[off..], (ld, 1), &mut gk.data_mut()[off..], (ld, 1), F::zero());
                    }
                    if let (Some(b), Some(gb)) = (bias, gbias) {
                        send(*b, gb);
                    }
                    send(*q, gq);
                    send(*k, gk);
                    send(*v, gv);
                }
                Op::GatherRows { table, ids } => {
                    let (rows, cols) = self.value(*table).dims2()?;
                    let mut gt = Tensor::zeros(&[rows, cols]);
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &g.data()[r * cols..(r + 1) * cols];
                        let dst = &mut gt.data_mut()[i * cols..(i + 1) * cols];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                    send(*table, gt);
                }
                Op::MeanSquaredRowError { pred, target } => {
                    let (rows, _) = target.dims2()?;
                    let c = g.data()[0] * F::from_f64_lossy(2.0) / F::from_usize(rows.max(1)).unwrap();
                    let data = self.value(*pred).data().iter().zip(target.data()).map(|(&p, &t)| c * (p - t)).collect();
                    send(*pred, Tensor::new(target.shape().to_vec(), data)?);
                }
                Op::Sum(x) => {
                    send(*x, Tensor::full(self.value(*x).shape(), g.data()[0]));
                }
            }
        }
        if !out.is_finite() {
            return Err(TensorError::NonFinite("gradients".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let s = store(&[("w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap())]);
        let mut g = Graph::new(&s);
        let w = g.param("w").unwrap();
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn unused_param_gets_no_gradient() {
        let s = store(&[("a", Tensor::full(&[2], 1.0)), ("b", Tensor::full(&[2], 1.0))]);
        let mut g = Graph::new(&s);
        let a = g.param("a").unwrap();
        let _b = g.param("b").unwrap();
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("b").map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_from_foreign_var_is_error() {
        let s = store(&[("a", Tensor::full(&[1], 1.0))]);
        let mut g1 = Graph::new(&s);
        let a = g1.param("a").unwrap();
        let loss = g1.sum(a);
        let g2 = Graph::new(&s);
        assert_eq!(g2.backward(loss).unwrap_err(), TensorError::NoForward);
    }

    #[test]
    fn softmax_masked_and_uniform() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::full(&[1, 4], 3.0));
        let y = g.softmax_rows(x, None).unwrap();
        assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let bias = g.constant(Tensor::new(vec![1, 4], vec![0.0, -1e9, 0.0, 0.0]).unwrap());
        let y = g.softmax_rows(x, Some(bias)).unwrap();
        assert!(g.value(y).data()[1] < 1e-30);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        let xs = [-3.0f64, -0.7, 0.0, 0.4, 2.5, 30.0, -30.0];
        let h = 1e-6;
        let (_, d) = gelu_slice(&xs);
        let (up, _) = gelu_slice(&xs.map(|x| x + h));
        let (down, _) = gelu_slice(&xs.map(|x| x - h));
        for i in 0..xs.len() {
            assert!(((up[i] - down[i]) / (2.0 * h) - d[i]).abs() < 1e-8);
        }
        let (y32, _) = gelu_slice(&xs.map(|x| x as f32));
        let (y64, _) = gelu_slice(&xs);
        for i in 0..xs.len() {
            assert!((y32[i] as f64 - y64[i]).abs() < 1e-6 * (1.0 + y64[i].abs()));
        }
    }

    #[test]
    fn gather_out_of_range() {
        let s = store(&[("e", Tensor::zeros(&[3, 2]))]);
        let mut g = Graph::new(&s);
        let e = g.param("e").unwrap();
        assert!(g.gather_rows(e, &[0, 3]).is_err());
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let q = g.constant(Tensor::zeros(&[2, 6]));
        assert!(g.attention(q, q, q, 4, None).is_err());
        assert!(g.attention(q, q, q, 0, None).is_err());
    }
}

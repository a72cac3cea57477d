//! Reverse-mode gradient tape.
//!
//! Every op appends a node holding its forward value and enough saved state
//! to run its gradient rule. [`Tape::backward`] replays the nodes in reverse
//! order and returns gradients for trainable leaves and parameters. A tape is
//! single use: build a fresh one (or [`Tape::reset`]) for each forward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

enum Op<F> {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, F),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    ScatterAddRows { x: Var, indices: Vec<usize> },
    IndexAddRows { base: Var, indices: Vec<usize>, src: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<F> },
    Mse { pred: Var, target: Var },
    Sum(Vec<Var>),
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<'p, F: Scalar> {
    params: Option<&'p ParamStore<F>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    leaves: Vec<Option<Tensor<F>>>,
    params: ParamGrads<F>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a trainable leaf or parameter node.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<F>> {
        self.leaves.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(id)
    }

    pub fn params(&self) -> &ParamGrads<F> {
        &self.params
    }

    pub fn into_param_grads(self) -> ParamGrads<F> {
        self.params
    }
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn with_params(params: &'p ParamStore<F>) -> Self {
        let mut param_vars = Vec::new();
        param_vars.resize(params.len(), None);
        Self {
            params: Some(params),
            param_vars,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drops all recorded nodes so the tape can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.iter_mut().for_each(|v| *v = None);
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("param nodes exist only on tapes with a store")
                .value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self.params.ok_or(Error::UnknownParam { index: id.0 })?;
        store.get(id)?;
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul_nt")?;
        let (n, k2) = tb.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        matmul_nt_kernel(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::matrix(m, n, out).map_err(|_| Error::NonFinite { op: "matmul_nt" })?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    /// `x * w + b` with `w` of shape `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut out = self.value(x).matmul(self.value(w))?;
        if let Some(b) = b {
            out = out.add_row_bias(self.value(b))?;
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_bias(self.value(bias))?;
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        let out = self.value(x).scale(factor)?;
        Ok(self.push(out, Op::Scale(x, factor), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows()?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (out, xhat, rstd) = self
            .value(x)
            .layer_norm_parts(self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).gelu()?;
        Ok(self.push(out, Op::Gelu(x), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&values)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Gathers rows; the gradient flows to the gathered values, never to the indices.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(indices)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn scatter_add_rows(&mut self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let out = self.value(x).scatter_add_rows(indices, rows)?;
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Copy of `base` with row `k` of `src` added into row `indices[k]`.
    /// Rows not listed are copied unchanged.
    pub fn index_add_rows(&mut self, base: Var, indices: &[usize], src: Var) -> Result<Var> {
        let (b, s) = (self.value(base), self.value(src));
        let (rows, c) = b.dims2("index_add_rows")?;
        let (sr, sc) = s.dims2("index_add_rows")?;
        if sc != c || sr != indices.len() {
            return Err(Error::Shape {
                op: "index_add_rows",
                left: b.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
        let mut out = b.data().to_vec();
        for (k, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(Error::Index {
                    op: "index_add_rows",
                    index: i,
                    bound: rows,
                });
            }
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(s.row(k)) {
                *o = *o + v;
            }
        }
        let out = Tensor::new(b.shape().to_vec(), out).map_err(|_| Error::NonFinite { op: "index_add_rows" })?;
        Ok(self.push(
            out,
            Op::IndexAddRows {
                base,
                indices: indices.to_vec(),
                src,
            },
            &[base, src],
        ))
    }

    /// Softmax cross-entropy of a single logit row against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        let (r, k) = t.dims2("cross_entropy")?;
        if r != 1 {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![1, k],
            });
        }
        if label >= k {
            return Err(Error::Index {
                op: "cross_entropy",
                index: label,
                bound: k,
            });
        }
        let z = t.data();
        let max = z.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = z.iter().map(|&v| (v - max).libm_exp()).sum::<F>().libm_ln() + max;
        let probs: Vec<F> = z.iter().map(|&v| (v - lse).libm_exp()).collect();
        let loss = lse - z[label];
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "cross_entropy" });
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared error between two tensors of equal shape.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::Shape {
                op: "mse",
                left: p.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let n = F::of(p.numel() as f64);
        let sq = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<F>();
        let loss = sq / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "mse" });
        }
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred, target]))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Shape {
            op: "sum",
            left: Vec::new(),
            right: Vec::new(),
        })?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            acc = acc.add(self.value(p))?;
        }
        Ok(self.push(acc, Op::Sum(parts.to_vec()), parts))
    }

    /// Runs the reverse sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar { shape });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Tensor::full(&shape, F::one()));

        let mut leaves: Vec<Option<Tensor<F>>> = Vec::with_capacity(n);
        leaves.resize_with(n, || None);
        let n_params = self.params.map_or(0, |p| p.len());
        let mut param_grads = ParamGrads::empty(n_params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => {
                    leaves[i] = Some(g.clone());
                    param_grads.accumulate(*id, g);
                }
                _ => self.propagate(i, g, &mut grads)?,
            }
        }

        for (_, g) in param_grads.iter() {
            if let Some(g) = g {
                if !g.data().iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients {
            leaves,
            params: param_grads,
        })
    }

    fn send(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let out = match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(_) => unreachable!("param nodes are leaves"),
        };
        match &self.nodes[i].op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2("matmul")?;
                let n = tb.cols();
                if self.needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    matmul_nt_kernel(g.data(), tb.data(), &mut da, m, n, k);
                    self.send(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); k * n];
                    matmul_tn_kernel(ta.data(), g.data(), &mut db, m, k, n);
                    self.send(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2("matmul_nt")?;
                let n = tb.rows();
                if self.needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    matmul_kernel(g.data(), tb.data(), &mut da, m, n, k);
                    self.send(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); n * k];
                    matmul_tn_kernel(g.data(), ta.data(), &mut db, m, n, k);
                    self.send(grads, *b, Tensor::matrix(n, k, db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, k) = tx.dims2("linear")?;
                let n = tw.cols();
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); m * k];
                    matmul_nt_kernel(g.data(), tw.data(), &mut dx, m, n, k);
                    let dx = Tensor::new(tx.shape().to_vec(), dx)?;
                    self.send(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); k * n];
                    matmul_tn_kernel(tx.data(), g.data(), &mut dw, m, k, n);
                    self.send(grads, *w, Tensor::matrix(k, n, dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.send(grads, *b, column_sums(&g, m, n));
                    }
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g);
            }
            Op::AddRowBias(x, bias) => {
                let (m, n) = g.dims2("add_row_bias")?;
                if self.needs(*bias) {
                    self.send(grads, *bias, column_sums(&g, m, n));
                }
                self.send(grads, *x, g);
            }
            Op::Scale(x, c) => {
                let c = *c;
                let dx = g.data().iter().map(|&v| v * c).collect();
                self.send(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Transpose(x) => {
                self.send(grads, *x, g.transpose()?);
            }
            Op::Softmax(x) => {
                let (r, c) = out.dims2("softmax_rows")?;
                let y = out.data();
                let mut dx = vec![F::zero(); r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g.data()[row * c..(row + 1) * c];
                    let dot = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..c {
                        dx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.send(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, d) = out.dims2("layer_norm")?;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                if self.needs(*gamma) {
                    let mut dg = vec![F::zero(); d];
                    for row in 0..r {
                        for j in 0..d {
                            dg[j] = dg[j] + gd[row * d + j] * xhat[row * d + j];
                        }
                    }
                    self.send(grads, *gamma, Tensor::vector(dg));
                }
                if self.needs(*beta) {
                    self.send(grads, *beta, column_sums(&g, r, d));
                }
                if self.needs(*x) {
                    let inv_d = F::one() / F::of(d as f64);
                    let mut dx = vec![F::zero(); r * d];
                    for row in 0..r {
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..d {
                            let dh = gd[row * d + j] * gam[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[row * d + j];
                        }
                        for j in 0..d {
                            let dh = gd[row * d + j] * gam[j];
                            let h = xhat[row * d + j];
                            dx[row * d + j] = rstd[row] * (dh - inv_d * sum_dh - h * inv_d * sum_dh_h);
                        }
                    }
                    self.send(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let inv_sqrt2 = F::of(core::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = F::of(0.398_942_280_401_432_7);
                let half = F::of(0.5);
                let dx = xs
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let cdf = half * (F::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).libm_exp();
                        gv * (cdf + v * pdf)
                    })
                    .collect();
                self.send(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::ConcatRows(parts) => {
                let c = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.needs(p) {
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        let shape = self.value(p).shape().to_vec();
                        self.send(grads, p, Tensor::new(shape, slice)?);
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let piece = g.slice_cols(start, w)?;
                        let shape = self.value(p).shape().to_vec();
                        self.send(grads, p, piece.reshape(&shape)?);
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2("slice_cols")?;
                let w = g.cols();
                let mut dx = vec![F::zero(); r * c];
                for row in 0..r {
                    dx[row * c + start..row * c + start + w].copy_from_slice(g.row(row));
                }
                let shape = self.value(*x).shape().to_vec();
                self.send(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::GatherRows { x, indices } => {
                let rows = self.value(*x).rows();
                let dx = g.scatter_add_rows(indices, rows)?;
                let shape = self.value(*x).shape().to_vec();
                self.send(grads, *x, dx.reshape(&shape)?);
            }
            Op::ScatterAddRows { x, indices } => {
                let dx = g.gather_rows(indices)?;
                let shape = self.value(*x).shape().to_vec();
                self.send(grads, *x, dx.reshape(&shape)?);
            }
            Op::IndexAddRows { base, indices, src } => {
                if self.needs(*src) {
                    let ds = g.gather_rows(indices)?;
                    self.send(grads, *src, ds);
                }
                self.send(grads, *base, g);
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let scale = g.data()[0];
                let mut d = probs.clone();
                d[*label] = d[*label] - F::one();
                for v in &mut d {
                    *v = *v * scale;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.send(grads, *logits, Tensor::new(shape, d)?);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let k = F::of(2.0) / F::of(p.numel() as f64) * g.data()[0];
                let d: Vec<F> = p.data().iter().zip(t.data()).map(|(&a, &b)| k * (a - b)).collect();
                if self.needs(*target) {
                    let neg = d.iter().map(|&v| -v).collect();
                    self.send(grads, *target, Tensor::new(t.shape().to_vec(), neg)?);
                }
                self.send(grads, *pred, Tensor::new(p.shape().to_vec(), d)?);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.send(grads, p, g.clone());
                }
            }
        }
        Ok(())
    }
}

fn column_sums<F: Scalar>(g: &Tensor<F>, rows: usize, cols: usize) -> Tensor<F> {
    let mut s = vec![F::zero(); cols];
    for r in 0..rows {
        for (acc, &v) in s.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
            *acc = *acc + v;
        }
    }
    Tensor::vector(s)
}

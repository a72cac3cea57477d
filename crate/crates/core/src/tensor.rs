//! Dense row-major tensors and the value-level kernels behind every tape op.
//!
//! Shapes are checked at every op boundary; the only broadcast is a bias
//! vector added across the rows of a matrix. Every kernel rejects a result
//! containing NaN or an infinity.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type tag, also used as the on-disk dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Floating-point element. Float64 is the verification precision, float32
/// the training default.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + core::iter::Sum + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn widen(self) -> f64;
    fn erf(self) -> Self;
    /// `exp` and `ln` through libm, so results do not depend on whether
    /// num-traits was built against std.
    fn libm_exp(self) -> Self;
    fn libm_ln(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    #[inline]
    fn libm_exp(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn libm_ln(self) -> Self {
        libm::logf(self)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    #[inline]
    fn libm_exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn libm_ln(self) -> Self {
        libm::log(self)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: fmt::Debug> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_finite<F: Scalar>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err("new", &shape, &[data.len()]));
        }
        check_finite("new", &data)?;
        Ok(Self { shape, data })
    }

    /// Row-major `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<F>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data,
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    /// Converts from `f64` values, rounding to `F`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        F::DTYPE
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.widen()).collect()
    }

    /// Mutable element access for optimizers and tests. Callers keep values finite.
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// `(rows, cols)` of a matrix. Vectors count as a single row.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(shape_err(op, &self.shape, &[])),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2("rows").map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2("cols").map(|d| d.1).unwrap_or(0)
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.widen() - b.widen()).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(shape_err("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_kernel(&self.data, &other.data, &mut out, m, k, n);
        check_finite("matmul", &out)?;
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(shape_err("transpose", &self.shape, &[]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err("add", &self.shape, &other.shape));
        }
        let out: Vec<F> = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        check_finite("add", &out)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Adds a length-`cols` bias to every row of a matrix.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.dims2("add_row_bias")?;
        if bias.shape != [c] {
            return Err(shape_err("add_row_bias", &self.shape, &bias.shape));
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
                *o = *o + b;
            }
        }
        check_finite("add_row_bias", &out)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn scale(&self, factor: F) -> Result<Self> {
        let out: Vec<F> = self.data.iter().map(|&a| a * factor).collect();
        check_finite("scale", &out)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2("softmax_rows")?;
        check_finite("softmax_rows", &self.data)?;
        let mut out = self.data.clone();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        check_finite("softmax_rows", &out)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Per-row normalization followed by the affine map `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: F) -> Result<Self> {
        Ok(self.layer_norm_parts(gamma, beta, eps)?.0)
    }

    /// Layer norm returning `(output, normalized input, per-row 1/std)`.
    pub(crate) fn layer_norm_parts(
        &self,
        gamma: &Self,
        beta: &Self,
        eps: F,
    ) -> Result<(Self, Vec<F>, Vec<F>)> {
        let (r, d) = self.dims2("layer_norm")?;
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(shape_err("layer_norm", &self.shape, &gamma.shape));
        }
        let inv_d = F::one() / F::of(d as f64);
        let mut out = vec![F::zero(); r * d];
        let mut xhat = vec![F::zero(); r * d];
        let mut rstd = vec![F::zero(); r];
        for i in 0..r {
            let row = &self.data[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = gamma.data[j] * h + beta.data[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let shape = self.shape.clone();
        Ok((Self { shape, data: out }, xhat, rstd))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&self) -> Result<Self> {
        let half = F::of(0.5);
        let inv_sqrt2 = F::of(core::f64::consts::FRAC_1_SQRT_2);
        let out: Vec<F> = self
            .data
            .iter()
            .map(|&x| half * x * (F::one() + (x * inv_sqrt2).erf()))
            .collect();
        check_finite("gelu", &out)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", &[], &[]))?;
        let (_, c) = first.dims2("concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.dims2("concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", &first.shape, &p.shape));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, c],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", &[], &[]))?;
        let (r, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2("concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", &first.shape, &p.shape));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Self {
            shape: vec![r, total],
            data,
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Self {
            shape: vec![r, len],
            data,
        })
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Self {
            shape: vec![indices.len(), c],
            data,
        })
    }

    /// Zero matrix of `rows` rows with row `k` of `self` added into row `indices[k]`.
    pub fn scatter_add_rows(&self, indices: &[usize], rows: usize) -> Result<Self> {
        let (r, c) = self.dims2("scatter_add_rows")?;
        if r != indices.len() {
            return Err(shape_err("scatter_add_rows", &self.shape, &[indices.len()]));
        }
        let mut out = vec![F::zero(); rows * c];
        for (k, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(Error::Index {
                    op: "scatter_add_rows",
                    index: i,
                    bound: rows,
                });
            }
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(&self.data[k * c..(k + 1) * c]) {
                *o = *o + v;
            }
        }
        check_finite("scatter_add_rows", &out)?;
        Ok(Self {
            shape: vec![rows, c],
            data: out,
        })
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).libm_exp();
        sum = sum + *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`, i-k-j order.
pub(crate) fn matmul_kernel<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`.
pub(crate) fn matmul_nt_kernel<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`.
pub(crate) fn matmul_tn_kernel<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

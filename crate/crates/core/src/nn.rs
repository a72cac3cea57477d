//! Parameterized building blocks shared by the encoders and the fusion rounds.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{Init, ParamId, ParamSink};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Affine map `x * W + b`, `W` stored as `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(sink: &mut impl ParamSink, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = sink.register(format!("{name}.weight"), &[in_dim, out_dim], Init::TruncNormal(INIT_STD), true);
        let bias = sink.register(format!("{name}.bias"), &[out_dim], Init::Zeros, false);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        tape.linear(x, w, Some(b))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(sink: &mut impl ParamSink, name: &str, dim: usize) -> Self {
        let gamma = sink.register(format!("{name}.gamma"), &[dim], Init::Ones, false);
        let beta = sink.register(format!("{name}.beta"), &[dim], Init::Zeros, false);
        Self { gamma, beta, dim }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma)?;
        let b = tape.param(self.beta)?;
        tape.layer_norm(x, g, b, F::of(LN_EPS))
    }
}

/// Multi-head scaled dot-product attention of `q` rows over `k`/`v` rows.
///
/// The score scale is `1/sqrt(d_head)`. Returns the concatenated head outputs
/// and, when `keep_maps` is set, each head's attention matrix.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    keep_maps: bool,
) -> Result<(Var, Vec<Var>)> {
    let dim = tape.value(q).cols();
    let head_dim = dim / heads;
    let scale = F::of(1.0 / libm::sqrt(head_dim as f64));
    let mut outputs = Vec::with_capacity(heads);
    let mut maps = Vec::new();
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * head_dim, head_dim)?,
                tape.slice_cols(k, h * head_dim, head_dim)?,
                tape.slice_cols(v, h * head_dim, head_dim)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        if keep_maps {
            maps.push(attn);
        }
        outputs.push(tape.matmul(attn, vh)?);
    }
    let out = if heads == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    Ok((out, maps))
}

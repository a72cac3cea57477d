//! Class-attention token ranking and top-fraction query selection.
//!
//! Importance of patch token `j` is the class token's attention to it,
//! averaged over heads, with the class-token column dropped and the rest
//! renormalized. Selection is a hard top-k: no gradient reaches the scores.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{config_err, Error, Result};
use crate::tape::Tape;
use crate::tensor::{softmax_in_place, Scalar, Tensor};
use crate::vit::TokenBatch;

/// Query or key map used to score tokens.
#[derive(Debug, Clone, Copy)]
pub enum Projection<'a, F> {
    Identity,
    Affine {
        weight: &'a Tensor<F>,
        bias: Option<&'a Tensor<F>>,
    },
}

impl<F: Scalar> Projection<'_, F> {
    fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Projection::Identity => Ok(x.clone()),
            Projection::Affine { weight, bias } => {
                let y = x.matmul(weight)?;
                match bias {
                    Some(b) => y.add_row_bias(b),
                    None => Ok(y),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Importance of each patch token (token rows `1..=N`), summing to 1.
    pub scores: Vec<f64>,
    /// Kept token rows in `1..=N`, descending score, ties by lower row.
    pub kept: Vec<usize>,
    pub keep_ratio: f64,
}

impl RankingResult {
    /// Keeps every patch in natural order; used when ranking is disabled.
    pub fn keep_all(num_patches: usize) -> Self {
        Self {
            scores: Vec::new(),
            kept: (1..=num_patches).collect(),
            keep_ratio: 1.0,
        }
    }
}

/// `ceil(alpha * n)` clamped to `1..=n`.
pub fn keep_count(alpha: f64, n: usize) -> Result<usize> {
    validate_ratio(alpha)?;
    // alpha * n is formed in floating point; a hair of slack keeps 0.3 * 10 at 3.
    let k = libm::ceil(alpha * n as f64 - 1e-9) as usize;
    Ok(k.clamp(1, n.max(1)))
}

pub fn validate_ratio(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(config_err(format!("token keep ratio must be in (0, 1], got {alpha}")))
    }
}

/// Class-token attention over the patch tokens of `tokens` (`T x d`, `T >= 2`).
pub fn class_attention<F: Scalar>(
    tokens: &Tensor<F>,
    wq: Projection<'_, F>,
    wk: Projection<'_, F>,
    heads: usize,
) -> Result<Vec<f64>> {
    let (t, _) = tokens.dims2("class_attention")?;
    if t < 2 {
        return Err(Error::Shape {
            op: "class_attention",
            left: tokens.shape().to_vec(),
            right: alloc::vec![2],
        });
    }
    let cls = tokens.gather_rows(&[0])?;
    let q = wq.apply(&cls)?;
    let k = wk.apply(tokens)?;
    let dim = q.cols();
    if k.cols() != dim || heads == 0 || dim % heads != 0 {
        return Err(Error::Shape {
            op: "class_attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let head_dim = dim / heads;
    let scale = F::of(1.0 / libm::sqrt(head_dim as f64));
    let mut avg = alloc::vec![0.0f64; t];
    let mut row = alloc::vec![F::zero(); t];
    for h in 0..heads {
        let qh = &q.data()[h * head_dim..(h + 1) * head_dim];
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k.row(j)[h * head_dim..(h + 1) * head_dim];
            *r = qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
        }
        softmax_in_place(&mut row);
        for (a, &r) in avg.iter_mut().zip(&row) {
            *a += r.widen() / heads as f64;
        }
    }
    let patch_mass: f64 = avg[1..].iter().sum();
    let scores: Vec<f64> = avg[1..].iter().map(|&a| a / patch_mass).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "class_attention" });
    }
    Ok(scores)
}

/// Keeps the `ceil(alpha * N)` highest-scoring patch tokens.
pub fn select_top(scores: &[f64], alpha: f64) -> Result<RankingResult> {
    let k = keep_count(alpha, scores.len())?;
    if scores.is_empty() {
        return Err(config_err("cannot rank an empty token set"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(RankingResult {
        scores: scores.to_vec(),
        kept: order[..k].iter().map(|&i| i + 1).collect(),
        keep_ratio: alpha,
    })
}

/// Class token followed by the kept patch tokens, origins preserved.
pub fn build_query_set<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: &TokenBatch,
    ranking: &RankingResult,
) -> Result<TokenBatch> {
    let rows = query_rows(ranking);
    let tokens = tape.gather_rows(x.tokens, &rows)?;
    let origin = rows
        .iter()
        .map(|&r| x.origin.get(r).copied().ok_or(Error::Index {
            op: "build_query_set",
            index: r,
            bound: x.origin.len(),
        }))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenBatch {
        tokens,
        origin,
        branch: x.branch,
    })
}

pub(crate) fn query_rows(ranking: &RankingResult) -> Vec<usize> {
    core::iter::once(0).chain(ranking.kept.iter().copied()).collect()
}

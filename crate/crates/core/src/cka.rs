//! Linear centered kernel alignment between two feature sets.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::record::AttentionRecord;
use crate::tensor::Tensor;
use crate::vit::Branch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cka {
    /// Similarity in `[0, 1]`.
    pub value: f64,
    /// Set when either input has no variance; `value` is then 0.
    pub degenerate: bool,
}

/// `||A^T B||_F^2 / (||A^T A||_F ||B^T B||_F)` on column-centered `A` (`n x p`)
/// and `B` (`n x q`).
pub fn linear_cka(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Cka> {
    let (n, _) = a.dims2("cka")?;
    let (m, _) = b.dims2("cka")?;
    if n != m || n < 2 {
        return Err(Error::Shape {
            op: "cka",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let a = center_columns(a)?;
    let b = center_columns(b)?;
    let ab = frobenius_sq(&a.transpose()?.matmul(&b)?);
    let aa = libm::sqrt(frobenius_sq(&a.transpose()?.matmul(&a)?));
    let bb = libm::sqrt(frobenius_sq(&b.transpose()?.matmul(&b)?));
    let denom = aa * bb;
    if denom <= f64::MIN_POSITIVE {
        return Ok(Cka {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cka {
        value: (ab / denom).clamp(0.0, 1.0),
        degenerate: false,
    })
}

pub fn center_columns(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, p) = x.dims2("center_columns")?;
    let mut means = alloc::vec![0.0; p];
    for r in 0..n {
        for (m, v) in means.iter_mut().zip(x.row(r)) {
            *m += v / n as f64;
        }
    }
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v - means[i % p])
        .collect();
    Tensor::matrix(n, p, data)
}

fn frobenius_sq(x: &Tensor<f64>) -> f64 {
    x.data().iter().map(|v| v * v).sum()
}

/// One point of a per-block similarity curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCka {
    pub branch: Branch,
    /// Block position within the branch, in application order.
    pub layer: usize,
    pub cka: Cka,
}

/// For each encoder block of `branch`, CKA between that block's patch-mean
/// token features and the branch's final class token across `records`.
pub fn layer_profile(records: &[AttentionRecord], branch: Branch) -> Result<Vec<LayerCka>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let depth = first.blocks_of(branch).count();
    let finals: Vec<&Vec<f64>> = records
        .iter()
        .map(|r| match branch {
            Branch::Global => r.global_class.as_ref(),
            Branch::Mip => r.mip_class.as_ref(),
        })
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Data("record is missing the final class token".into()))?;
    let q = finals[0].len();
    let target = Tensor::matrix(records.len(), q, finals.iter().flat_map(|v| v.iter().copied()).collect())?;
    let mut out = Vec::with_capacity(depth);
    for layer in 0..depth {
        let mut rows = Vec::new();
        let mut p = 0;
        for r in records {
            let block = r
                .blocks_of(branch)
                .nth(layer)
                .ok_or_else(|| Error::Data("records disagree on block count".into()))?;
            let (t, d) = block.tokens.dims2("layer_profile")?;
            p = d;
            for c in 0..d {
                let s: f64 = (1..t).map(|i| block.tokens.data()[i * d + c]).sum();
                rows.push(s / (t - 1).max(1) as f64);
            }
        }
        let features = Tensor::matrix(records.len(), p, rows)?;
        out.push(LayerCka {
            branch,
            layer,
            cka: linear_cka(&features, &target)?,
        });
    }
    Ok(out)
}

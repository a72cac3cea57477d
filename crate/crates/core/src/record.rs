//! Captured attention maps, keep-sets and token features for inspection.

use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::vit::Branch;

/// Self-attention of one encoder block.
#[derive(Debug, Clone)]
pub struct BlockRecord {
    pub branch: Branch,
    pub layer: usize,
    pub block: usize,
    /// One `(T x T)` map per head.
    pub heads: Vec<Tensor<f64>>,
    /// Head-averaged class-token row over all `T` columns.
    pub class_row: Vec<f64>,
    /// Block output tokens `(T x d)`.
    pub tokens: Tensor<f64>,
}

/// One direction of a fusion round, keyed by the query (source) branch.
#[derive(Debug, Clone)]
pub struct DirectionRecord {
    pub branch: Branch,
    /// Class-attention importance per patch token (sums to 1). Empty when
    /// ranking was skipped.
    pub scores: Vec<f64>,
    /// Kept patch positions (1-based token rows), descending score.
    pub kept: Vec<usize>,
    pub num_patches: usize,
    /// Head-averaged cross-attention, `(queries x T_dst)`.
    pub cross_attention: Tensor<f64>,
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub layer: usize,
    pub round: usize,
    pub global: DirectionRecord,
    pub mip: DirectionRecord,
}

#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub blocks: Vec<BlockRecord>,
    pub rounds: Vec<RoundRecord>,
    /// Final (pre-head, normalized) class token per branch.
    pub global_class: Option<Vec<f64>>,
    pub mip_class: Option<Vec<f64>>,
}

impl AttentionRecord {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mean over rounds of the fraction of `target` patches (0-based grid
    /// indices) that the given branch kept as queries. `None` without rounds.
    pub fn keep_recall(&self, branch: Branch, target: &[usize]) -> Option<f64> {
        if self.rounds.is_empty() || target.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for r in &self.rounds {
            let d = if branch == Branch::Global { &r.global } else { &r.mip };
            let hit = target.iter().filter(|&&p| d.kept.contains(&(p + 1))).count();
            sum += hit as f64 / target.len() as f64;
        }
        Some(sum / self.rounds.len() as f64)
    }

    pub fn blocks_of(&self, branch: Branch) -> impl Iterator<Item = &BlockRecord> {
        self.blocks.iter().filter(move |b| b.branch == branch)
    }

    /// Largest deviation from 1 of any stored attention row sum.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut check = |t: &Tensor<f64>| {
            let c = t.cols();
            for r in 0..t.rows() {
                let s: f64 = t.data()[r * c..(r + 1) * c].iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        };
        for b in &self.blocks {
            b.heads.iter().for_each(&mut check);
        }
        for r in &self.rounds {
            check(&r.global.cross_attention);
            check(&r.mip.cross_attention);
        }
        worst
    }
}

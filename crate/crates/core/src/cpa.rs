//! Bidirectional cross-patch attention between the global and MIP branches.
//!
//! In one direction the source branch ranks its patch tokens, keeps the class
//! token plus the top fraction as queries, and attends over every token of
//! the destination branch:
//!
//! ```text
//! Q_sel = LN(src[kept]) Wq        (d_src -> d_dst)
//! K, V  = LN(dst) Wk, LN(dst) Wv  (d_dst -> d_dst)
//! out   = softmax(Q_sel K^T / sqrt(d_head)) V Wo   (d_dst -> d_src)
//! ```
//!
//! and `out` is added back into the rows the queries came from. Rows that
//! were not selected pass through untouched. `Wq` and `Wo` double as the
//! cross-dimension adapters between the two embedding sizes.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Result;
use crate::nn::{multi_head_attention, LayerNorm, Linear, LN_EPS};
use crate::params::ParamSink;
use crate::ranking::{class_attention, query_rows, select_top, validate_ratio, Projection, RankingResult};
use crate::record::DirectionRecord;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{to_f64, Branch, EncoderBlock, TokenBatch};

/// Cross-attention weights for queries from one branch over the other.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub src_dim: usize,
    pub dst_dim: usize,
    pub heads: usize,
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl CrossAttention {
    pub fn new(sink: &mut impl ParamSink, name: &str, src_dim: usize, dst_dim: usize, heads: usize) -> Self {
        Self {
            src_dim,
            dst_dim,
            heads,
            norm_q: LayerNorm::new(sink, &format!("{name}.norm_q"), src_dim),
            norm_kv: LayerNorm::new(sink, &format!("{name}.norm_kv"), dst_dim),
            wq: Linear::new(sink, &format!("{name}.wq"), src_dim, dst_dim),
            wk: Linear::new(sink, &format!("{name}.wk"), dst_dim, dst_dim),
            wv: Linear::new(sink, &format!("{name}.wv"), dst_dim, dst_dim),
            wo: Linear::new(sink, &format!("{name}.wo"), dst_dim, src_dim),
        }
    }
}

/// One fusion round: an independent weight set per direction.
#[derive(Debug, Clone)]
pub struct CpaRound {
    pub index: usize,
    /// Global-branch queries over MIP keys and values.
    pub global_queries: CrossAttention,
    /// MIP-branch queries over global keys and values.
    pub mip_queries: CrossAttention,
    /// Per-branch ranking maps `(global, mip)` when the round scores tokens
    /// with its own projections.
    pub ranking: Option<(RankingProjections, RankingProjections)>,
}

impl CpaRound {
    pub fn new(
        sink: &mut impl ParamSink,
        name: &str,
        index: usize,
        (global_dim, mip_dim): (usize, usize),
        (global_heads, mip_heads): (usize, usize),
        dedicated_ranking: bool,
    ) -> Self {
        let global_queries = CrossAttention::new(sink, &format!("{name}.gq"), global_dim, mip_dim, mip_heads);
        let mip_queries = CrossAttention::new(sink, &format!("{name}.mq"), mip_dim, global_dim, global_heads);
        let ranking = dedicated_ranking.then(|| {
            (
                RankingProjections::new(sink, &format!("{name}.global"), global_dim, global_heads),
                RankingProjections::new(sink, &format!("{name}.mip"), mip_dim, mip_heads),
            )
        });
        Self {
            index,
            global_queries,
            mip_queries,
            ranking,
        }
    }
}

/// Where a branch gets the projections used to score its tokens.
#[derive(Debug, Clone, Copy)]
pub enum Ranker<'a> {
    /// Optional norm followed by query/key maps, applied to the current tokens.
    Projections {
        norm: Option<&'a LayerNorm>,
        wq: &'a Linear,
        wk: &'a Linear,
        heads: usize,
    },
    /// Raw token dot products split over `heads`.
    Identity { heads: usize },
}

impl<'a> Ranker<'a> {
    /// Scores with the pre-attention norm and query/key maps of `block`.
    pub fn from_block(block: &'a EncoderBlock) -> Self {
        Ranker::Projections {
            norm: Some(&block.norm1),
            wq: &block.wq,
            wk: &block.wk,
            heads: block.heads,
        }
    }

    /// Class-attention importance of each patch token of `x`.
    pub fn scores<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: &TokenBatch) -> Result<Vec<f64>> {
        match *self {
            Ranker::Identity { heads } => {
                let t = tape.value(x.tokens);
                class_attention(t, Projection::Identity, Projection::Identity, heads)
            }
            Ranker::Projections { norm, wq, wk, heads } => {
                let q = [tape.param(wq.weight)?, tape.param(wq.bias)?];
                let k = [tape.param(wk.weight)?, tape.param(wk.bias)?];
                let normed = match norm {
                    Some(n) => {
                        let g = tape.param(n.gamma)?;
                        let b = tape.param(n.beta)?;
                        Some(tape.value(x.tokens).layer_norm(tape.value(g), tape.value(b), F::of(LN_EPS))?)
                    }
                    None => None,
                };
                let input = normed.as_ref().unwrap_or_else(|| tape.value(x.tokens));
                let wq = Projection::Affine {
                    weight: tape.value(q[0]),
                    bias: Some(tape.value(q[1])),
                };
                let wk = Projection::Affine {
                    weight: tape.value(k[0]),
                    bias: Some(tape.value(k[1])),
                };
                class_attention(input, wq, wk, heads)
            }
        }
    }
}

/// Dedicated ranking maps owned by one branch of a fusion round.
#[derive(Debug, Clone)]
pub struct RankingProjections {
    pub wq: Linear,
    pub wk: Linear,
    pub heads: usize,
}

impl RankingProjections {
    pub fn new(sink: &mut impl ParamSink, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            wq: Linear::new(sink, &format!("{name}.rank_wq"), dim, dim),
            wk: Linear::new(sink, &format!("{name}.rank_wk"), dim, dim),
            heads,
        }
    }

    pub fn ranker(&self) -> Ranker<'_> {
        Ranker::Projections {
            norm: None,
            wq: &self.wq,
            wk: &self.wk,
            heads: self.heads,
        }
    }
}

/// Token selection for one direction: `Some(alpha)` ranks and keeps the top
/// fraction, `None` keeps every patch in natural order.
pub fn rank_tokens<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: &TokenBatch,
    ranker: Ranker<'_>,
    alpha: Option<f64>,
) -> Result<RankingResult> {
    let n = x.len() - 1;
    match alpha {
        Some(a) => {
            validate_ratio(a)?;
            let scores = ranker.scores(tape, x)?;
            select_top(&scores, a)
        }
        None => Ok(RankingResult::keep_all(n)),
    }
}

/// Queries from rows `rows` of `src` attend over all of `dst`; updates are
/// added back into those rows.
fn cross_update<F: Scalar>(
    tape: &mut Tape<'_, F>,
    src: &TokenBatch,
    dst: &TokenBatch,
    attn: &CrossAttention,
    rows: &[usize],
    keep_map: bool,
) -> Result<(TokenBatch, Option<Tensor<f64>>)> {
    let q_in = tape.gather_rows(src.tokens, rows)?;
    let q_in = attn.norm_q.forward(tape, q_in)?;
    let q = attn.wq.forward(tape, q_in)?;
    let kv = attn.norm_kv.forward(tape, dst.tokens)?;
    let k = attn.wk.forward(tape, kv)?;
    let v = attn.wv.forward(tape, kv)?;
    let (o, maps) = multi_head_attention(tape, q, k, v, attn.heads, keep_map)?;
    let update = attn.wo.forward(tape, o)?;
    let out = tape.index_add_rows(src.tokens, rows, update)?;
    let map = if keep_map { Some(average_maps(tape, &maps)) } else { None };
    Ok((src.with_tokens(out), map))
}

fn average_maps<F: Scalar>(tape: &Tape<'_, F>, maps: &[Var]) -> Tensor<f64> {
    let mut acc = to_f64(tape.value(maps[0]));
    for &m in &maps[1..] {
        for (a, &b) in acc.data_mut().iter_mut().zip(tape.value(m).data()) {
            *a += b.widen();
        }
    }
    let inv = 1.0 / maps.len() as f64;
    acc.data_mut().iter_mut().for_each(|a| *a *= inv);
    acc
}

/// One direction of cross-patch attention.
pub fn cpa_direction<F: Scalar>(
    tape: &mut Tape<'_, F>,
    src: &TokenBatch,
    dst: &TokenBatch,
    attn: &CrossAttention,
    ranker: Ranker<'_>,
    alpha: Option<f64>,
    record: Option<&mut Option<DirectionRecord>>,
) -> Result<TokenBatch> {
    let ranking = rank_tokens(tape, src, ranker, alpha)?;
    let rows = query_rows(&ranking);
    let (out, map) = cross_update(tape, src, dst, attn, &rows, record.is_some())?;
    if let (Some(slot), Some(map)) = (record, map) {
        *slot = Some(DirectionRecord {
            branch: src.branch,
            scores: ranking.scores,
            kept: ranking.kept,
            num_patches: src.len() - 1,
            cross_attention: map,
        });
    }
    Ok(out)
}

/// Per-direction options for a fusion round.
#[derive(Debug, Clone, Copy)]
pub struct DirectionSetup<'a> {
    pub ranker: Ranker<'a>,
    pub alpha: Option<f64>,
}

/// Records of both directions of a round.
#[derive(Debug, Default)]
pub struct RoundCapture {
    pub global: Option<DirectionRecord>,
    pub mip: Option<DirectionRecord>,
}

/// Both directions of a round, each reading the pre-round token states.
pub fn cpa_round<F: Scalar>(
    tape: &mut Tape<'_, F>,
    global: &TokenBatch,
    mip: &TokenBatch,
    round: &CpaRound,
    (global_setup, mip_setup): (DirectionSetup<'_>, DirectionSetup<'_>),
    mut capture: Option<&mut RoundCapture>,
) -> Result<(TokenBatch, TokenBatch)> {
    let g = cpa_direction(
        tape,
        global,
        mip,
        &round.global_queries,
        global_setup.ranker,
        global_setup.alpha,
        capture.as_deref_mut().map(|c| &mut c.global),
    )?;
    let m = cpa_direction(
        tape,
        mip,
        global,
        &round.mip_queries,
        mip_setup.ranker,
        mip_setup.alpha,
        capture.map(|c| &mut c.mip),
    )?;
    Ok((g, m))
}

/// Class-token exchange: only each class token queries the other branch.
pub fn cca_round<F: Scalar>(
    tape: &mut Tape<'_, F>,
    global: &TokenBatch,
    mip: &TokenBatch,
    round: &CpaRound,
    mut capture: Option<&mut RoundCapture>,
) -> Result<(TokenBatch, TokenBatch)> {
    let keep = capture.is_some();
    let (g, gmap) = cross_update(tape, global, mip, &round.global_queries, &[0], keep)?;
    let (m, mmap) = cross_update(tape, mip, global, &round.mip_queries, &[0], keep)?;
    if let (Some(c), Some(gmap), Some(mmap)) = (capture.as_deref_mut(), gmap, mmap) {
        c.global = Some(class_only_record(Branch::Global, global.len() - 1, gmap));
        c.mip = Some(class_only_record(Branch::Mip, mip.len() - 1, mmap));
    }
    Ok((g, m))
}

fn class_only_record(branch: Branch, num_patches: usize, map: Tensor<f64>) -> DirectionRecord {
    DirectionRecord {
        branch,
        scores: Vec::new(),
        kept: Vec::new(),
        num_patches,
        cross_attention: map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn batch(tape: &mut Tape<'_, f64>, rows: usize, cols: usize, seed: usize, branch: Branch) -> TokenBatch {
        let data = (0..rows * cols)
            .map(|i| (((i * 31 + seed * 17) % 23) as f64) / 11.0 - 1.0)
            .collect();
        let tokens = tape.constant(Tensor::matrix(rows, cols, data).unwrap());
        TokenBatch {
            tokens,
            origin: (0..rows).collect(),
            branch,
        }
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut store = ParamStore::<f64>::new(1);
        let round = CpaRound::new(&mut store, "r", 0, (4, 6), (2, 3), false);
        store
            .set_value(round.global_queries.wv.weight, Tensor::zeros(&[6, 6]))
            .unwrap();
        let mut tape = Tape::with_params(&store);
        let g = batch(&mut tape, 5, 4, 1, Branch::Global);
        let m = batch(&mut tape, 3, 6, 2, Branch::Mip);
        let ranker = Ranker::Identity { heads: 2 };
        let out = cpa_direction(&mut tape, &g, &m, &round.global_queries, ranker, Some(0.5), None).unwrap();
        assert_eq!(tape.value(out.tokens), tape.value(g.tokens));
    }

    #[test]
    fn unselected_rows_pass_through_bitwise() {
        let mut store = ParamStore::<f64>::new(2);
        let round = CpaRound::new(&mut store, "r", 0, (4, 6), (2, 3), false);
        let mut tape = Tape::with_params(&store);
        let g = batch(&mut tape, 7, 4, 3, Branch::Global);
        let m = batch(&mut tape, 4, 6, 4, Branch::Mip);
        let mut rec = None;
        let out = cpa_direction(
            &mut tape,
            &g,
            &m,
            &round.global_queries,
            Ranker::Identity { heads: 2 },
            Some(0.34),
            Some(&mut rec),
        )
        .unwrap();
        let rec = rec.unwrap();
        assert_eq!(rec.kept.len(), 3);
        let before = tape.value(g.tokens).clone();
        let after = tape.value(out.tokens).clone();
        for r in 0..7 {
            let touched = r == 0 || rec.kept.contains(&r);
            let same = before.row(r).iter().zip(after.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
            assert_eq!(same, !touched, "row {r}");
        }
        for r in 0..rec.cross_attention.rows() {
            assert!((rec.cross_attention.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rounds_are_simultaneous() {
        let mut store = ParamStore::<f64>::new(3);
        let round = CpaRound::new(&mut store, "r", 0, (4, 6), (2, 3), false);
        let mut tape = Tape::with_params(&store);
        let g = batch(&mut tape, 5, 4, 5, Branch::Global);
        let m = batch(&mut tape, 4, 6, 6, Branch::Mip);
        let setup = (
            DirectionSetup {
                ranker: Ranker::Identity { heads: 2 },
                alpha: Some(0.5),
            },
            DirectionSetup {
                ranker: Ranker::Identity { heads: 3 },
                alpha: Some(0.5),
            },
        );
        let (g1, m1) = cpa_round(&mut tape, &g, &m, &round, setup, None).unwrap();
        // reverse order by hand
        let m2 = cpa_direction(&mut tape, &m, &g, &round.mip_queries, setup.1.ranker, setup.1.alpha, None).unwrap();
        let g2 = cpa_direction(&mut tape, &g, &m, &round.global_queries, setup.0.ranker, setup.0.alpha, None).unwrap();
        assert_eq!(tape.value(g1.tokens), tape.value(g2.tokens));
        assert_eq!(tape.value(m1.tokens), tape.value(m2.tokens));
    }

    #[test]
    fn cca_leaves_patch_tokens_unchanged() {
        let mut store = ParamStore::<f64>::new(4);
        let round = CpaRound::new(&mut store, "r", 0, (4, 6), (2, 3), false);
        let mut tape = Tape::with_params(&store);
        let g = batch(&mut tape, 5, 4, 7, Branch::Global);
        let m = batch(&mut tape, 4, 6, 8, Branch::Mip);
        let (g1, m1) = cca_round(&mut tape, &g, &m, &round, None).unwrap();
        for (a, b) in [(&g, &g1), (&m, &m1)] {
            let (x, y) = (tape.value(a.tokens), tape.value(b.tokens));
            let c = x.cols();
            let patches_same = x.data()[c..]
                .iter()
                .zip(&y.data()[c..])
                .all(|(p, q)| p.to_bits() == q.to_bits());
            assert!(patches_same);
            assert!(x.row(0) != y.row(0));
        }
    }

    #[test]
    fn zero_weights_round_passes_through() {
        let mut store = ParamStore::<f64>::new(5);
        let round = CpaRound::new(&mut store, "r", 0, (4, 6), (2, 3), false);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::with_params(&store);
        let mut g = batch(&mut tape, 5, 4, 9, Branch::Global);
        let mut m = batch(&mut tape, 4, 6, 10, Branch::Mip);
        let (g0, m0) = (tape.value(g.tokens).clone(), tape.value(m.tokens).clone());
        let setup = DirectionSetup {
            ranker: Ranker::Identity { heads: 1 },
            alpha: Some(0.5),
        };
        for _ in 0..3 {
            let (a, b) = cpa_round(&mut tape, &g, &m, &round, (setup, setup), None).unwrap();
            g = a;
            m = b;
        }
        assert_eq!(tape.value(g.tokens), &g0);
        assert_eq!(tape.value(m.tokens), &m0);
    }
}

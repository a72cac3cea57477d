//! Patch embedding, multi-head self-attention and the pre-norm encoder block.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::nn::{multi_head_attention, LayerNorm, Linear, INIT_STD};
use crate::params::{Init, ParamId, ParamSink};
use crate::record::BlockRecord;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const MLP_RATIO: usize = 4;
pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Global,
    Mip,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Mip => "mip",
        }
    }
}

/// Token matrix of one branch. `origin[r]` is the position in the embedded
/// sequence that row `r` came from; row 0 is the class token.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Var,
    pub origin: Vec<usize>,
    pub branch: Branch,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self {
            tokens,
            origin: self.origin.clone(),
            branch: self.branch,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    pub branch: Branch,
    pub side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub proj: Linear,
    pub class_token: ParamId,
    pub pos_embedding: ParamId,
}

impl PatchEmbedder {
    pub fn new(
        sink: &mut impl ParamSink,
        branch: Branch,
        side: usize,
        patch_size: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if patch_size == 0 || side % patch_size != 0 {
            return Err(config_err(format!(
                "{} side {side} is not divisible by patch size {patch_size}",
                branch.name()
            )));
        }
        let name = branch.name();
        let n = (side / patch_size) * (side / patch_size);
        let patch_dim = patch_size * patch_size * IN_CHANNELS;
        let proj = Linear::new(sink, &format!("{name}.embed.proj"), patch_dim, embed_dim);
        let class_token = sink.register(format!("{name}.embed.cls"), &[1, embed_dim], Init::Zeros, false);
        let pos_embedding = sink.register(
            format!("{name}.embed.pos"),
            &[n + 1, embed_dim],
            Init::TruncNormal(INIT_STD),
            false,
        );
        Ok(Self {
            branch,
            side,
            patch_size,
            embed_dim,
            proj,
            class_token,
            pos_embedding,
        })
    }

    pub fn grid(&self) -> usize {
        self.side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattens a `3 x side x side` image into `N` rows of `3 * p * p` values
    /// (channel, then row, then column), patches in row-major grid order.
    pub fn patchify<F: Scalar>(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        patchify(image, self.side, self.patch_size)
    }

    /// Projects patch rows, prepends the class token and adds position embeddings.
    pub fn embed<F: Scalar>(&self, tape: &mut Tape<'_, F>, patches: Var) -> Result<TokenBatch> {
        let (n, dim) = tape.value(patches).dims2("embed")?;
        if n != self.num_patches() || dim != self.patch_size * self.patch_size * IN_CHANNELS {
            return Err(Error::Shape {
                op: "embed",
                left: tape.shape(patches).to_vec(),
                right: alloc::vec![self.num_patches(), self.patch_size * self.patch_size * IN_CHANNELS],
            });
        }
        let x = self.proj.forward(tape, patches)?;
        let cls = tape.param(self.class_token)?;
        let seq = tape.concat_rows(&[cls, x])?;
        let pos = tape.param(self.pos_embedding)?;
        let tokens = tape.add(seq, pos)?;
        Ok(TokenBatch {
            tokens,
            origin: (0..=n).collect(),
            branch: self.branch,
        })
    }

    pub fn embed_image<F: Scalar>(&self, tape: &mut Tape<'_, F>, image: &Tensor<F>) -> Result<TokenBatch> {
        let patches = self.patchify(image)?;
        let v = tape.constant(patches);
        self.embed(tape, v)
    }
}

pub fn patchify<F: Scalar>(image: &Tensor<F>, side: usize, patch: usize) -> Result<Tensor<F>> {
    if image.shape() != [IN_CHANNELS, side, side] {
        return Err(Error::Shape {
            op: "patchify",
            left: image.shape().to_vec(),
            right: alloc::vec![IN_CHANNELS, side, side],
        });
    }
    if side % patch != 0 {
        return Err(config_err(format!("side {side} is not divisible by patch size {patch}")));
    }
    let grid = side / patch;
    let dim = IN_CHANNELS * patch * patch;
    let px = image.data();
    let mut out = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..IN_CHANNELS {
                for y in 0..patch {
                    let row = (c * side + gy * patch + y) * side + gx * patch;
                    out.extend_from_slice(&px[row..row + patch]);
                }
            }
        }
    }
    Tensor::matrix(grid * grid, dim, out)
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Attention maps captured by [`mhsa`].
#[derive(Debug, Clone, Default)]
pub struct AttentionMaps {
    pub heads: Vec<Tensor<f64>>,
    pub class_row: Vec<f64>,
}

impl EncoderBlock {
    pub fn new(sink: &mut impl ParamSink, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err(format!("{name}: dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            dim,
            heads,
            norm1: LayerNorm::new(sink, &format!("{name}.norm1"), dim),
            wq: Linear::new(sink, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(sink, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(sink, &format!("{name}.wv"), dim, dim),
            proj: Linear::new(sink, &format!("{name}.proj"), dim, dim),
            norm2: LayerNorm::new(sink, &format!("{name}.norm2"), dim),
            fc1: Linear::new(sink, &format!("{name}.fc1"), dim, MLP_RATIO * dim),
            fc2: Linear::new(sink, &format!("{name}.fc2"), MLP_RATIO * dim, dim),
        })
    }

    /// Projected self-attention of `input` (no norm, no residual).
    fn attend<F: Scalar>(&self, tape: &mut Tape<'_, F>, input: Var, maps: Option<&mut AttentionMaps>) -> Result<Var> {
        let q = self.wq.forward(tape, input)?;
        let k = self.wk.forward(tape, input)?;
        let v = self.wv.forward(tape, input)?;
        let (out, head_maps) = multi_head_attention(tape, q, k, v, self.heads, maps.is_some())?;
        if let Some(maps) = maps {
            maps.heads = head_maps.iter().map(|&m| to_f64(tape.value(m))).collect();
            let t = maps.heads[0].cols();
            let mut row = alloc::vec![0.0; t];
            for h in &maps.heads {
                for (acc, &a) in row.iter_mut().zip(h.row(0)) {
                    *acc += a / self.heads as f64;
                }
            }
            maps.class_row = row;
        }
        self.proj.forward(tape, out)
    }

    /// Pre-norm block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        x: &TokenBatch,
        maps: Option<&mut AttentionMaps>,
    ) -> Result<TokenBatch> {
        self.check_dim(tape, x)?;
        let h = self.norm1.forward(tape, x.tokens)?;
        let a = self.attend(tape, h, maps)?;
        let x1 = tape.add(x.tokens, a)?;
        let h = self.norm2.forward(tape, x1)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, h)?;
        let x2 = tape.add(x1, h)?;
        Ok(x.with_tokens(x2))
    }

    fn check_dim<F: Scalar>(&self, tape: &Tape<'_, F>, x: &TokenBatch) -> Result<()> {
        let (_, d) = tape.value(x.tokens).dims2("encoder")?;
        if d != self.dim {
            return Err(Error::Shape {
                op: "encoder",
                left: tape.shape(x.tokens).to_vec(),
                right: alloc::vec![x.len(), self.dim],
            });
        }
        Ok(())
    }
}

/// Attention sublayer with residual: `x + proj(softmax(Q K^T / sqrt(d/S)) V)`,
/// projections applied to `x` directly.
pub fn mhsa<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: &TokenBatch,
    block: &EncoderBlock,
    record: Option<&mut AttentionMaps>,
) -> Result<TokenBatch> {
    block.check_dim(tape, x)?;
    let a = block.attend(tape, x.tokens, record)?;
    let out = tape.add(x.tokens, a)?;
    Ok(x.with_tokens(out))
}

/// Applies `blocks` in order. When `record` is given, each block's maps and
/// output tokens are appended with the given layer index.
pub fn encoder_stack<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: &TokenBatch,
    blocks: &[EncoderBlock],
    layer: usize,
    mut record: Option<&mut Vec<BlockRecord>>,
) -> Result<TokenBatch> {
    let mut cur = x.clone();
    for (i, block) in blocks.iter().enumerate() {
        match record.as_deref_mut() {
            Some(out) => {
                let mut maps = AttentionMaps::default();
                cur = block.forward(tape, &cur, Some(&mut maps))?;
                out.push(BlockRecord {
                    branch: x.branch,
                    layer,
                    block: i,
                    heads: maps.heads,
                    class_row: maps.class_row,
                    tokens: to_f64(tape.value(cur.tokens)),
                });
            }
            None => cur = block.forward(tape, &cur, None)?,
        }
    }
    Ok(cur)
}

pub(crate) fn to_f64<F: Scalar>(t: &Tensor<F>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.to_f64_vec()).expect("finite values stay finite in f64")
}

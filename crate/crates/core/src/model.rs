//! Configuration, assembly and forward pass of the dual-branch model.
//!
//! ```text
//! global image -> embed -+-> [G blocks] -+-> fusion x C -+-> ... L layers -> LN -> cls -+
//!                        |               |               |                              +-> head
//! MIP crop     -> embed -+-> [M blocks] -+---------------+-> ... L layers -> LN -> cls -+
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::cpa::{cca_round, cpa_round, CpaRound, DirectionSetup, Ranker, RoundCapture};
use crate::error::{config_err, Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamSink, ParamStore, ShapeCounter};
use crate::ranking::validate_ratio;
use crate::record::{AttentionRecord, RoundRecord};
use crate::synth::{DualSample, Label};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{encoder_stack, to_f64, Branch, EncoderBlock, PatchEmbedder, TokenBatch, IN_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification { num_classes: usize },
    Regression,
}

impl Task {
    pub fn outputs(&self) -> usize {
        match *self {
            Task::Classification { num_classes } => num_classes,
            Task::Regression => 1,
        }
    }
}

/// How the two final class tokens reach the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadCombine {
    Concat,
    /// Elementwise sum; needs equal branch dims.
    Sum,
}

/// Branch interaction after each layer's encoder stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    None,
    /// Class tokens only query the other branch.
    Cca,
    /// Ranked patch tokens plus the class token query the other branch.
    Cpa,
}

/// Which projections score tokens for ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankingSource {
    /// The pre-attention norm and query/key maps of the branch's last encoder
    /// block in the layer, applied to the tokens entering each round.
    Encoder,
    /// Per-round, per-branch query/key maps owned by the fusion round.
    Dedicated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcatConfig {
    pub global_side: usize,
    pub mip_side: usize,
    pub global_patch: usize,
    pub mip_patch: usize,
    pub d_global: usize,
    pub d_mip: usize,
    pub heads_global: usize,
    pub heads_mip: usize,
    /// Global encoder blocks per layer (G).
    pub depth_global: usize,
    /// MIP encoder blocks per layer (M).
    pub depth_mip: usize,
    /// Fusion rounds per layer (C).
    pub rounds: usize,
    /// Multi-scale layers (L).
    pub layers: usize,
    pub alpha_global: f64,
    pub alpha_mip: f64,
    pub task: Task,
    pub dual_input: bool,
    /// Branch kept when `dual_input` is off.
    pub single_branch: Branch,
    pub cpa_enabled: bool,
    pub ranking_enabled: bool,
    pub cca_mode: bool,
    pub head_combine: HeadCombine,
    pub ranking_source: RankingSource,
    pub seed: u64,
}

impl Default for DcatConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DcatConfig {
    /// Desk-scale defaults: 96/96 inputs, dims 64/32.
    pub fn desk() -> Self {
        Self {
            global_side: 96,
            mip_side: 96,
            global_patch: 12,
            mip_patch: 16,
            d_global: 64,
            d_mip: 32,
            heads_global: 4,
            heads_mip: 2,
            depth_global: 6,
            depth_mip: 1,
            rounds: 3,
            layers: 1,
            alpha_global: 0.5,
            alpha_mip: 0.5,
            task: Task::Classification { num_classes: 3 },
            dual_input: true,
            single_branch: Branch::Global,
            cpa_enabled: true,
            ranking_enabled: true,
            cca_mode: false,
            head_combine: HeadCombine::Concat,
            ranking_source: RankingSource::Encoder,
            seed: 0,
        }
    }

    /// Full-size layout: 240/224 inputs, dims 384/192, heads 6/3, G=6, M=1, C=3.
    pub fn full_scale() -> Self {
        Self {
            global_side: 240,
            mip_side: 224,
            d_global: 384,
            d_mip: 192,
            heads_global: 6,
            heads_mip: 3,
            ..Self::desk()
        }
    }

    /// Reduced layout used for the multi-seed benchmark runs: 32/16 inputs,
    /// patches 8/4 (16 tokens per branch), dims 32/16, G=2, M=1, C=2.
    pub fn compact() -> Self {
        Self {
            global_side: 32,
            mip_side: 16,
            global_patch: 8,
            mip_patch: 4,
            d_global: 32,
            d_mip: 16,
            heads_global: 2,
            heads_mip: 2,
            depth_global: 2,
            depth_mip: 1,
            rounds: 2,
            layers: 1,
            ..Self::desk()
        }
    }

    /// Smallest configuration with every component present, for gradient checks.
    pub fn micro() -> Self {
        Self {
            global_side: 24,
            mip_side: 32,
            d_global: 8,
            d_mip: 8,
            heads_global: 2,
            heads_mip: 2,
            depth_global: 1,
            depth_mip: 1,
            rounds: 1,
            layers: 1,
            ..Self::desk()
        }
    }

    pub fn fusion(&self) -> Fusion {
        if !self.dual_input || !self.cpa_enabled || self.rounds == 0 {
            Fusion::None
        } else if self.cca_mode {
            Fusion::Cca
        } else {
            Fusion::Cpa
        }
    }

    /// Keep ratios per branch; `None` keeps every patch in natural order.
    pub fn keep_ratios(&self) -> (Option<f64>, Option<f64>) {
        if self.ranking_enabled {
            (Some(self.alpha_global), Some(self.alpha_mip))
        } else {
            (None, None)
        }
    }

    pub fn uses(&self, branch: Branch) -> bool {
        self.dual_input || self.single_branch == branch
    }

    pub fn num_patches(&self, branch: Branch) -> usize {
        let (side, patch) = match branch {
            Branch::Global => (self.global_side, self.global_patch),
            Branch::Mip => (self.mip_side, self.mip_patch),
        };
        (side / patch) * (side / patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(config_err("layers must be at least 1"));
        }
        for (name, side, patch) in [
            ("global", self.global_side, self.global_patch),
            ("mip", self.mip_side, self.mip_patch),
        ] {
            if patch == 0 || side == 0 || side % patch != 0 {
                return Err(config_err(format!("{name} side {side} is not divisible by patch size {patch}")));
            }
        }
        for (name, d, h) in [
            ("global", self.d_global, self.heads_global),
            ("mip", self.d_mip, self.heads_mip),
        ] {
            if d == 0 || h == 0 || d % h != 0 {
                return Err(config_err(format!("{name} dim {d} is not divisible by {h} heads")));
            }
        }
        validate_ratio(self.alpha_global)?;
        validate_ratio(self.alpha_mip)?;
        if let Task::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return Err(config_err(format!("num_classes must be at least 2, got {num_classes}")));
            }
        }
        if self.dual_input && self.head_combine == HeadCombine::Sum && self.d_global != self.d_mip {
            return Err(config_err(format!(
                "summed class tokens need equal dims, got {} and {}",
                self.d_global, self.d_mip
            )));
        }
        Ok(())
    }
}

/// Patch embedder, per-layer encoder blocks and final norm of one branch.
#[derive(Debug, Clone)]
pub struct BranchStack {
    pub branch: Branch,
    pub embed: PatchEmbedder,
    pub layers: Vec<Vec<EncoderBlock>>,
    pub norm: LayerNorm,
}

impl BranchStack {
    /// Every block in application order.
    pub fn blocks(&self) -> impl Iterator<Item = &EncoderBlock> {
        self.layers.iter().flatten()
    }
}

#[derive(Debug, Clone)]
pub struct DcatModel {
    pub config: DcatConfig,
    pub global: Option<BranchStack>,
    pub mip: Option<BranchStack>,
    /// `fusion[l][c]` is round `c` of layer `l`.
    pub fusion: Vec<Vec<CpaRound>>,
    pub head: Linear,
}

/// Model-ready tensors for one sample.
#[derive(Debug, Clone)]
pub struct ModelInput<F> {
    pub global: Option<Tensor<F>>,
    pub mip: Option<Tensor<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Class(usize),
    Score(f64),
}

impl DcatModel {
    pub fn new(config: &DcatConfig, sink: &mut impl ParamSink) -> Result<Self> {
        config.validate()?;
        let c = config;
        let global_embed = if c.uses(Branch::Global) {
            Some(PatchEmbedder::new(sink, Branch::Global, c.global_side, c.global_patch, c.d_global)?)
        } else {
            None
        };
        let mip_embed = if c.uses(Branch::Mip) {
            Some(PatchEmbedder::new(sink, Branch::Mip, c.mip_side, c.mip_patch, c.d_mip)?)
        } else {
            None
        };
        let fusion_kind = c.fusion();
        let mut global_layers = Vec::with_capacity(c.layers);
        let mut mip_layers = Vec::with_capacity(c.layers);
        let mut fusion = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            if global_embed.is_some() {
                let blocks = (0..c.depth_global)
                    .map(|b| EncoderBlock::new(sink, &format!("global.block{}", l * c.depth_global + b), c.d_global, c.heads_global))
                    .collect::<Result<Vec<_>>>()?;
                global_layers.push(blocks);
            }
            if mip_embed.is_some() {
                let blocks = (0..c.depth_mip)
                    .map(|b| EncoderBlock::new(sink, &format!("mip.block{}", l * c.depth_mip + b), c.d_mip, c.heads_mip))
                    .collect::<Result<Vec<_>>>()?;
                mip_layers.push(blocks);
            }
            let rounds = if fusion_kind == Fusion::None {
                Vec::new()
            } else {
                let dedicated = fusion_kind == Fusion::Cpa && c.ranking_enabled && c.ranking_source == RankingSource::Dedicated;
                (0..c.rounds)
                    .map(|r| {
                        let index = l * c.rounds + r;
                        CpaRound::new(
                            sink,
                            &format!("fusion.round{index}"),
                            index,
                            (c.d_global, c.d_mip),
                            (c.heads_global, c.heads_mip),
                            dedicated,
                        )
                    })
                    .collect()
            };
            fusion.push(rounds);
        }
        let global = global_embed.map(|embed| BranchStack {
            branch: Branch::Global,
            embed,
            layers: global_layers,
            norm: LayerNorm::new(sink, "global.norm", c.d_global),
        });
        let mip = mip_embed.map(|embed| BranchStack {
            branch: Branch::Mip,
            embed,
            layers: mip_layers,
            norm: LayerNorm::new(sink, "mip.norm", c.d_mip),
        });
        let head_in = match (&global, &mip) {
            (Some(_), Some(_)) if c.head_combine == HeadCombine::Sum => c.d_global,
            (Some(_), Some(_)) => c.d_global + c.d_mip,
            (Some(_), None) => c.d_global,
            _ => c.d_mip,
        };
        let head = Linear::new(sink, "head", head_in, c.task.outputs());
        Ok(Self {
            config: config.clone(),
            global,
            mip,
            fusion,
            head,
        })
    }

    /// Builds the model and a freshly initialized parameter store seeded from the config.
    pub fn init<F: Scalar>(config: &DcatConfig) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new(config.seed);
        let model = Self::new(config, &mut store)?;
        Ok((model, store))
    }

    pub fn branch(&self, branch: Branch) -> Option<&BranchStack> {
        match branch {
            Branch::Global => self.global.as_ref(),
            Branch::Mip => self.mip.as_ref(),
        }
    }

    /// Resamples the global view and the cropped MIP view to the configured sides.
    pub fn prepare<F: Scalar>(&self, sample: &DualSample) -> Result<ModelInput<F>> {
        prepare_input(&self.config, sample)
    }

    /// Logits (`1 x K`) or regression output (`1 x 1`).
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        input: &ModelInput<F>,
        mut record: Option<&mut AttentionRecord>,
    ) -> Result<Var> {
        let mut g = match &self.global {
            Some(stack) => Some(embed_branch(tape, stack, input.global.as_ref(), "global input")?),
            None => None,
        };
        let mut m = match &self.mip {
            Some(stack) => Some(embed_branch(tape, stack, input.mip.as_ref(), "mip input")?),
            None => None,
        };
        let (alpha_g, alpha_m) = self.config.keep_ratios();
        for l in 0..self.config.layers {
            if let (Some(stack), Some(x)) = (&self.global, &g) {
                g = Some(encoder_stack(tape, x, &stack.layers[l], l, record.as_deref_mut().map(|r| &mut r.blocks))?);
            }
            if let (Some(stack), Some(x)) = (&self.mip, &m) {
                m = Some(encoder_stack(tape, x, &stack.layers[l], l, record.as_deref_mut().map(|r| &mut r.blocks))?);
            }
            if g.is_none() || m.is_none() {
                continue;
            }
            let (Some(mut gx), Some(mut mx)) = (g.take(), m.take()) else {
                unreachable!()
            };
            for round in &self.fusion[l] {
                let mut capture = record.as_ref().map(|_| RoundCapture::default());
                let (a, b) = match self.config.fusion() {
                    Fusion::Cca => cca_round(tape, &gx, &mx, round, capture.as_mut())?,
                    _ => {
                        let setups = (
                            DirectionSetup {
                                ranker: self.ranker(Branch::Global, l, round),
                                alpha: alpha_g,
                            },
                            DirectionSetup {
                                ranker: self.ranker(Branch::Mip, l, round),
                                alpha: alpha_m,
                            },
                        );
                        cpa_round(tape, &gx, &mx, round, setups, capture.as_mut())?
                    }
                };
                gx = a;
                mx = b;
                if let (Some(r), Some(RoundCapture { global: Some(gr), mip: Some(mr) })) = (record.as_deref_mut(), capture) {
                    r.rounds.push(RoundRecord {
                        layer: l,
                        round: round.index,
                        global: gr,
                        mip: mr,
                    });
                }
            }
            g = Some(gx);
            m = Some(mx);
        }

        let mut classes = Vec::with_capacity(2);
        for (stack, x) in [(&self.global, &g), (&self.mip, &m)] {
            if let (Some(stack), Some(x)) = (stack, x) {
                let cls = tape.gather_rows(x.tokens, &[0])?;
                let cls = stack.norm.forward(tape, cls)?;
                if let Some(r) = record.as_deref_mut() {
                    let v = tape.value(cls).to_f64_vec();
                    match stack.branch {
                        Branch::Global => r.global_class = Some(v),
                        Branch::Mip => r.mip_class = Some(v),
                    }
                }
                classes.push(cls);
            }
        }
        let head_in = match (classes.len(), self.config.head_combine) {
            (1, _) => classes[0],
            (_, HeadCombine::Sum) => tape.add(classes[0], classes[1])?,
            _ => tape.concat_cols(&classes)?,
        };
        self.head.forward(tape, head_in)
    }

    fn ranker<'a>(&'a self, branch: Branch, layer: usize, round: &'a CpaRound) -> Ranker<'a> {
        let heads = match branch {
            Branch::Global => self.config.heads_global,
            Branch::Mip => self.config.heads_mip,
        };
        if let Some((rg, rm)) = &round.ranking {
            return match branch {
                Branch::Global => rg.ranker(),
                Branch::Mip => rm.ranker(),
            };
        }
        match self.branch(branch).and_then(|s| s.layers[layer].last()) {
            Some(block) => Ranker::from_block(block),
            None => Ranker::Identity { heads },
        }
    }

    /// Cross-entropy against a class label, or squared error against a score.
    pub fn loss<F: Scalar>(&self, tape: &mut Tape<'_, F>, output: Var, label: &Label) -> Result<Var> {
        match (self.config.task, *label) {
            (Task::Classification { num_classes }, Label::Class(c)) => {
                if c >= num_classes {
                    return Err(Error::Label(format!("class {c} is out of range for {num_classes} classes")));
                }
                tape.cross_entropy(output, c)
            }
            (Task::Regression, Label::Score(s)) => {
                if !(0.0..=Label::SCORE_MAX).contains(&s) {
                    return Err(Error::Label(format!("score {s} is outside [0, {}]", Label::SCORE_MAX)));
                }
                let target = tape.constant(Tensor::matrix(1, 1, alloc::vec![F::of(s)])?);
                tape.mse(output, target)
            }
            (task, label) => Err(Error::Label(format!("label {label:?} does not fit task {task:?}"))),
        }
    }

    pub fn predict<F: Scalar>(&self, output: &Tensor<F>) -> Prediction {
        match self.config.task {
            Task::Regression => Prediction::Score(output.data()[0].widen()),
            Task::Classification { .. } => Prediction::Class(argmax(output.data())),
        }
    }
}

/// First index of the largest value.
pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn embed_branch<F: Scalar>(
    tape: &mut Tape<'_, F>,
    stack: &BranchStack,
    image: Option<&Tensor<F>>,
    op: &'static str,
) -> Result<TokenBatch> {
    let side = stack.embed.side;
    let expected = alloc::vec![IN_CHANNELS, side, side];
    match image {
        Some(img) if img.shape() == expected.as_slice() => stack.embed.embed_image(tape, img),
        Some(img) => Err(Error::Shape {
            op,
            left: img.shape().to_vec(),
            right: expected,
        }),
        None => Err(Error::Shape {
            op,
            left: Vec::new(),
            right: expected,
        }),
    }
}

pub fn prepare_input<F: Scalar>(config: &DcatConfig, sample: &DualSample) -> Result<ModelInput<F>> {
    sample.validate()?;
    let global = if config.uses(Branch::Global) {
        Some(sample.image.to_tensor(config.global_side)?)
    } else {
        None
    };
    let mip = if config.uses(Branch::Mip) {
        Some(sample.image.crop(&sample.mip_box)?.to_tensor(config.mip_side)?)
    } else {
        None
    };
    Ok(ModelInput { global, mip })
}

/// Mirrors the image and the box horizontally.
pub fn hflip_sample(sample: &DualSample) -> DualSample {
    let b = sample.mip_box;
    let mut out = sample.clone();
    out.image = sample.image.hflip();
    out.mip_box.x = sample.image.width() - b.x - b.w;
    out
}

/// Global-grid patches (0-based, row-major) that intersect the sample's MIP box.
pub fn box_patches(config: &DcatConfig, sample: &DualSample) -> Vec<usize> {
    let grid = config.global_side / config.global_patch;
    let sx = sample.image.width() as f64 / config.global_side as f64;
    let sy = sample.image.height() as f64 / config.global_side as f64;
    let cell_w = config.global_patch as f64 * sx;
    let cell_h = config.global_patch as f64 * sy;
    let b = sample.mip_box;
    let mut out = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let (x0, y0) = (gx as f64 * cell_w, gy as f64 * cell_h);
            let overlaps = (b.x as f64) < x0 + cell_w
                && x0 < (b.x + b.w) as f64
                && (b.y as f64) < y0 + cell_h
                && y0 < (b.y + b.h) as f64;
            if overlaps {
                out.push(gy * grid + gx);
            }
        }
    }
    out
}

/// Trainable scalar count grouped by module, in registration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

/// Groups parameter names by their first two dotted components
/// (`global.block3`, `fusion.round0`, `head`).
pub fn param_report(config: &DcatConfig) -> Result<ParamReport> {
    let mut counter = ShapeCounter::default();
    DcatModel::new(config, &mut counter)?;
    let mut modules: Vec<(String, usize)> = Vec::new();
    for (name, shape) in &counter.entries {
        let parts: Vec<&str> = name.split('.').collect();
        let key = if parts.len() > 2 { parts[..2].join(".") } else { String::from(parts[0]) };
        let n: usize = shape.iter().product();
        match modules.last_mut() {
            Some((k, c)) if *k == key => *c += n,
            _ => modules.push((key, n)),
        }
    }
    Ok(ParamReport {
        total: counter.total(),
        modules,
    })
}

pub fn param_count(config: &DcatConfig) -> Result<usize> {
    Ok(param_report(config)?.total)
}

/// Per-block token features of a recorded forward pass, as
/// `(block index in branch, branch, tokens)`.
pub fn block_features(record: &AttentionRecord, branch: Branch) -> Vec<(usize, Tensor<f64>)> {
    record
        .blocks_of(branch)
        .enumerate()
        .map(|(i, b)| (i, b.tokens.clone()))
        .collect()
}

/// Converts a tensor to `f64` for reporting.
pub fn as_f64<F: Scalar>(t: &Tensor<F>) -> Tensor<f64> {
    to_f64(t)
}

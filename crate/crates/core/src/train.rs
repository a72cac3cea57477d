//! Training loop, evaluation metrics and ablation presets.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::model::{hflip_sample, prepare_input, DcatConfig, DcatModel, ModelInput, Prediction, Task};
use crate::optim::{AdamW, LrSchedule};
use crate::params::{ParamGrads, ParamStore};
use crate::synth::{DualSample, Label};
use crate::tape::Tape;
use crate::tensor::{DType, Scalar};
use crate::vit::Branch;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: DType,
    /// Random horizontal flips of image and box. Off by default: the
    /// synthetic background classes are orientation-coded.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 6,
            batch_size: 32,
            base_lr: 1e-3,
            weight_decay: 0.05,
            seed: 0,
            precision: DType::F32,
            hflip: false,
        }
    }
}

impl TrainConfig {
    /// 40 epochs with a 4-epoch warmup, paired with `DcatConfig::compact`.
    pub fn compact() -> Self {
        Self {
            epochs: 40,
            warmup_epochs: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(config_err(format!(
                "warmup_epochs ({}) must be less than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(config_err(format!("base_lr must be finite and non-negative, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Runs `n` independent jobs and returns their results in index order.
pub trait Executor: Sync {
    fn run<R: Send>(&self, n: usize, job: &(dyn Fn(usize) -> R + Sync)) -> Vec<R>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn run<R: Send>(&self, n: usize, job: &(dyn Fn(usize) -> R + Sync)) -> Vec<R> {
        (0..n).map(job).collect()
    }
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: alloc::vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub confusion: Option<ConfusionMatrix>,
}

impl EvalMetrics {
    /// Accuracy for classification, MSE for regression.
    pub fn headline(&self) -> f64 {
        self.accuracy.or(self.mse).unwrap_or(f64::NAN)
    }
}

/// Metrics from predictions alone; `loss` is left at 0.
pub fn score_predictions(task: Task, predictions: &[Prediction], labels: &[Label]) -> Result<EvalMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = labels.len();
    match task {
        Task::Classification { num_classes } => {
            let mut cm = ConfusionMatrix::new(num_classes);
            for (p, l) in predictions.iter().zip(labels) {
                match (p, l) {
                    (Prediction::Class(p), Label::Class(t)) if *p < num_classes && *t < num_classes => cm.add(*t, *p),
                    _ => return Err(Error::Label(format!("cannot score {p:?} against {l:?}"))),
                }
            }
            Ok(EvalMetrics {
                samples: n,
                loss: 0.0,
                accuracy: Some(cm.accuracy()),
                mse: None,
                confusion: Some(cm),
            })
        }
        Task::Regression => {
            let mut se = 0.0;
            for (p, l) in predictions.iter().zip(labels) {
                match (p, l) {
                    (Prediction::Score(p), Label::Score(t)) => se += (p - t) * (p - t),
                    _ => return Err(Error::Label(format!("cannot score {p:?} against {l:?}"))),
                }
            }
            Ok(EvalMetrics {
                samples: n,
                loss: 0.0,
                accuracy: None,
                mse: Some(if n == 0 { 0.0 } else { se / n as f64 }),
                confusion: None,
            })
        }
    }
}

/// Samples converted to model inputs once.
#[derive(Debug, Clone)]
pub struct PreparedSet<F> {
    pub inputs: Vec<ModelInput<F>>,
    pub flipped: Option<Vec<ModelInput<F>>>,
    pub labels: Vec<Label>,
}

impl<F: Scalar> PreparedSet<F> {
    pub fn new(config: &DcatConfig, samples: &[DualSample], with_flips: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let inputs = samples.iter().map(|s| prepare_input(config, s)).collect::<Result<Vec<_>>>()?;
        let flipped = if with_flips {
            Some(
                samples
                    .iter()
                    .map(|s| prepare_input(config, &hflip_sample(s)))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            inputs,
            flipped,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

struct SampleResult<F> {
    loss: f64,
    prediction: Prediction,
    grads: Option<ParamGrads<F>>,
}

fn run_sample<F: Scalar>(
    model: &DcatModel,
    store: &ParamStore<F>,
    input: &ModelInput<F>,
    label: &Label,
    with_grad: bool,
) -> Result<SampleResult<F>> {
    let mut tape = Tape::with_params(store);
    let out = model.forward(&mut tape, input, None)?;
    let prediction = model.predict(tape.value(out));
    let loss = model.loss(&mut tape, out, label)?;
    let loss_value = tape.value(loss).data()[0].widen();
    let grads = if with_grad {
        Some(tape.backward(loss)?.into_param_grads())
    } else {
        None
    };
    Ok(SampleResult {
        loss: loss_value,
        prediction,
        grads,
    })
}

pub fn evaluate<F: Scalar>(
    model: &DcatModel,
    store: &ParamStore<F>,
    data: &PreparedSet<F>,
    exec: &impl Executor,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let results = exec.run(data.len(), &|i| run_sample(model, store, &data.inputs[i], &data.labels[i], false));
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(results.len());
    for r in results {
        let r = r?;
        loss += r.loss;
        predictions.push(r.prediction);
    }
    let mut metrics = score_predictions(model.config.task, &predictions, &data.labels)?;
    metrics.loss = loss / data.len() as f64;
    Ok(metrics)
}

/// Per-epoch metric row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Trains `store` in place. Gradients of a batch are computed per sample
/// (possibly in parallel) and summed in sample order before the update.
pub fn train<F: Scalar>(
    model: &DcatModel,
    store: &mut ParamStore<F>,
    train_set: &PreparedSet<F>,
    test_set: Option<&PreparedSet<F>>,
    tc: &TrainConfig,
    exec: &impl Executor,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(tc.batch_size);
    let schedule = LrSchedule::new(tc.base_lr, tc.warmup_epochs * steps_per_epoch, tc.epochs * steps_per_epoch)?;
    let mut opt = AdamW::new(store, tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..n).map(|_| tc.hflip && rng.random::<bool>()).collect();
        let mut loss_sum = 0.0;
        let mut predictions = alloc::vec![Prediction::Class(0); n];
        for batch in order.chunks(tc.batch_size) {
            let frozen: &ParamStore<F> = store;
            let results = exec.run(batch.len(), &|j| {
                let i = batch[j];
                let input = match (&train_set.flipped, flips[i]) {
                    (Some(f), true) => &f[i],
                    _ => &train_set.inputs[i],
                };
                run_sample(model, frozen, input, &train_set.labels[i], true)
            });
            let mut grads = ParamGrads::empty(store.len());
            for (j, r) in results.into_iter().enumerate() {
                let r = r.map_err(|e| diverged(e, epoch, step))?;
                if !r.loss.is_finite() {
                    return Err(Error::Divergence { epoch, step });
                }
                loss_sum += r.loss;
                predictions[batch[j]] = r.prediction;
                if let Some(g) = &r.grads {
                    grads.add_assign(g);
                }
            }
            grads.scale(F::of(1.0 / batch.len() as f64));
            opt.step(store, &grads, schedule.at(step));
            step += 1;
        }
        let train_metrics = score_predictions(model.config.task, &predictions, &train_set.labels)?;
        log.push(EpochLog {
            epoch,
            split: "train",
            loss: loss_sum / n as f64,
            metric: train_metrics.headline(),
        });
        if let Some(test) = test_set {
            let m = evaluate(model, store, test, exec).map_err(|e| diverged(e, epoch, step))?;
            log.push(EpochLog {
                epoch,
                split: "test",
                loss: m.loss,
                metric: m.headline(),
            });
        }
    }
    Ok(TrainOutcome {
        log,
        steps: opt.steps(),
    })
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence { epoch, step },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Module ladder: base, +dual input, +patch fusion, +ranking.
    Table5,
    /// Input ablation: global only, MIP only, both.
    Table6,
    /// Class-token exchange against patch fusion.
    Table7,
    /// MIP keep-ratio sweep.
    Fig3,
}

impl Suite {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "table5" => Ok(Suite::Table5),
            "table6" => Ok(Suite::Table6),
            "table7" => Ok(Suite::Table7),
            "fig3" => Ok(Suite::Fig3),
            other => Err(config_err(format!("unknown suite '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Table5 => "table5",
            Suite::Table6 => "table6",
            Suite::Table7 => "table7",
            Suite::Fig3 => "fig3",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub config: DcatConfig,
}

fn preset(name: &str, config: DcatConfig) -> Preset {
    Preset {
        name: String::from(name),
        config,
    }
}

pub fn global_only(base: &DcatConfig) -> DcatConfig {
    DcatConfig {
        dual_input: false,
        single_branch: Branch::Global,
        ..base.clone()
    }
}

pub fn mip_only(base: &DcatConfig) -> DcatConfig {
    DcatConfig {
        dual_input: false,
        single_branch: Branch::Mip,
        ..base.clone()
    }
}

pub fn dual_cca(base: &DcatConfig) -> DcatConfig {
    DcatConfig {
        dual_input: true,
        cpa_enabled: true,
        cca_mode: true,
        ranking_enabled: false,
        ..base.clone()
    }
}

pub fn dual_cpa(base: &DcatConfig) -> DcatConfig {
    DcatConfig {
        dual_input: true,
        cpa_enabled: true,
        cca_mode: false,
        ranking_enabled: false,
        ..base.clone()
    }
}

pub fn dual_cpa_ranking(base: &DcatConfig) -> DcatConfig {
    DcatConfig {
        dual_input: true,
        cpa_enabled: true,
        cca_mode: false,
        ranking_enabled: true,
        ..base.clone()
    }
}

pub const FIG3_KEEP_RATIOS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Preset configurations of a suite, derived from `base`.
pub fn suite_presets(suite: Suite, base: &DcatConfig) -> Vec<Preset> {
    match suite {
        Suite::Table5 => alloc::vec![
            preset("base", global_only(base)),
            preset("+A", dual_cca(base)),
            preset("+A+B", dual_cpa(base)),
            preset("+A+B+C", dual_cpa_ranking(base)),
        ],
        Suite::Table6 => alloc::vec![
            preset("global-only", global_only(base)),
            preset("mip-only", mip_only(base)),
            preset("dual", dual_cpa_ranking(base)),
        ],
        Suite::Table7 => alloc::vec![preset("dual+CCA", dual_cca(base)), preset("dual+CPA", dual_cpa_ranking(base))],
        Suite::Fig3 => FIG3_KEEP_RATIOS
            .iter()
            .map(|&a| {
                preset(
                    &format!("alpha_mip={a}"),
                    DcatConfig {
                        alpha_mip: a,
                        ..dual_cpa_ranking(base)
                    },
                )
            })
            .collect(),
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// One trained preset at one seed.
#[derive(Debug, Clone)]
pub struct PresetRun<F> {
    pub preset: String,
    pub seed: u64,
    pub model: DcatModel,
    pub store: ParamStore<F>,
    pub test: EvalMetrics,
    pub log: Vec<EpochLog>,
}

/// Trains every preset at every seed on shared data. The seed sets both the
/// model initialization and the batch order.
pub fn run_presets<F: Scalar>(
    presets: &[Preset],
    seeds: &[u64],
    train_samples: &[DualSample],
    test_samples: &[DualSample],
    tc: &TrainConfig,
    exec: &impl Executor,
    mut progress: impl FnMut(&PresetRun<F>),
) -> Result<Vec<PresetRun<F>>> {
    if seeds.is_empty() {
        return Err(config_err("at least one seed is required"));
    }
    let mut runs = Vec::with_capacity(presets.len() * seeds.len());
    for p in presets {
        let train_set = PreparedSet::<F>::new(&p.config, train_samples, tc.hflip)?;
        let test_set = PreparedSet::<F>::new(&p.config, test_samples, false)?;
        for &seed in seeds {
            let config = DcatConfig { seed, ..p.config.clone() };
            let (model, mut store) = DcatModel::init::<F>(&config)?;
            let tc = TrainConfig { seed, ..tc.clone() };
            let outcome = train(&model, &mut store, &train_set, None, &tc, exec)?;
            let test = evaluate(&model, &store, &test_set, exec)?;
            let run = PresetRun {
                preset: p.name.clone(),
                seed,
                model,
                store,
                test,
                log: outcome.log,
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Per-preset summary of a set of runs, in first-seen preset order.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetSummary {
    pub preset: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize<F>(runs: &[PresetRun<F>]) -> Vec<PresetSummary> {
    let mut out: Vec<PresetSummary> = Vec::new();
    for r in runs {
        let score = r.test.headline();
        match out.iter_mut().find(|s| s.preset == r.preset) {
            Some(s) => s.scores.push(score),
            None => out.push(PresetSummary {
                preset: r.preset.clone(),
                scores: alloc::vec![score],
                mean: 0.0,
                std: 0.0,
            }),
        }
    }
    for s in &mut out {
        let (m, d) = mean_std(&s.scores);
        s.mean = m;
        s.std = d;
    }
    out
}

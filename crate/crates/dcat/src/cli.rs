//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dcat_core::model::{param_report, DcatConfig};
use dcat_core::synth::{generate_dataset, DualSample, SynthSpec};
use dcat_core::train::{evaluate, run_presets, suite_presets, summarize, train, PreparedSet, Suite};
use dcat_core::{DType, DcatModel, Scalar};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config_file::{
    model_preset, parse_precision, parse_run_config, parse_synth_spec, run_config_to_text, synth_spec_to_text,
    RunConfig,
};
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{AppError, AppResult, ErrorKind};
use crate::exec::Threaded;
use crate::inspect::inspect;
use crate::report::{ablation_csv, eval_text, metrics_csv, param_report_text};

pub const CHECKPOINT_FILE: &str = "checkpoint.dcat";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "dcat", version, about = "Dual-input transformer with cross-patch attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a per-epoch metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train every preset of a suite over several seeds and compare.
    Ablate(AblateArgs),
    /// Print the parameter count per module.
    Params(ParamsArgs),
    /// Export keep-masks, attention overlays and a CKA curve for one sample.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Synthetic spec file (key = value); defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset evaluated after every epoch.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides both the initialization and the batch-order seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<DType>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<DType>,
    /// Also write the report to this directory as eval.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_parser = parse_suite)]
    pub suite: Suite,
    /// Comma-separated seed list.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Base configuration the presets are derived from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training data; generated from --spec when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Generated training samples (test set is half this size).
    #[arg(long, default_value_t = 3000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<DType>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// desk, full, micro or compact.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset holding the sample; also the CKA batch.
    #[arg(long)]
    pub data: PathBuf,
    /// Sample id; the first sample when omitted.
    #[arg(long)]
    pub sample: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<DType>,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    Suite::parse(s).map_err(|e| e.to_string())
}

fn read_text(path: &Path) -> AppResult<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(ErrorKind::Config, path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> AppResult<()> {
    fs::write(path, bytes).map_err(|e| AppError::io(ErrorKind::Other, path, e))
}

fn make_dir(path: &Path) -> AppResult<()> {
    fs::create_dir_all(path).map_err(|e| AppError::io(ErrorKind::Other, path, e))
}

pub fn load_run_config(path: Option<&Path>) -> AppResult<RunConfig> {
    match path {
        Some(p) => parse_run_config(&read_text(p)?).map_err(|e| e.at(p)),
        None => Ok(RunConfig::default()),
    }
}

fn load_spec(path: Option<&Path>) -> AppResult<SynthSpec> {
    match path {
        Some(p) => parse_synth_spec(&read_text(p)?).map_err(|e| e.at(p)),
        None => Ok(SynthSpec::default()),
    }
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Params(a) => cmd_params(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn cmd_generate(a: GenerateArgs) -> AppResult<()> {
    let mut spec = load_spec(a.spec.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let set = generate_dataset(&spec, a.n)?;
    make_dir(&a.out)?;
    write_dataset(&a.out, &set.samples)?;
    write_file(&a.out.join("spec.txt"), synth_spec_to_text(&spec).as_bytes())?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

fn read_data(path: &Path, config: &DcatConfig) -> AppResult<Vec<DualSample>> {
    read_dataset(path, config.task)
}

fn cmd_train(a: TrainArgs) -> AppResult<()> {
    let mut run = load_run_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        run.model.seed = s;
        run.train.seed = s;
    }
    if let Some(p) = a.precision {
        run.train.precision = p;
    }
    let train_samples = read_data(&a.data, &run.model)?;
    let test_samples = a.test.as_deref().map(|p| read_data(p, &run.model)).transpose()?;
    let exec = Threaded::from_env()?;
    make_dir(&a.out)?;
    match run.train.precision {
        DType::F32 => train_with::<f32>(&run, &train_samples, test_samples.as_deref(), &a.out, &exec),
        DType::F64 => train_with::<f64>(&run, &train_samples, test_samples.as_deref(), &a.out, &exec),
    }
}

fn train_with<F: Scalar>(
    run: &RunConfig,
    train_samples: &[DualSample],
    test_samples: Option<&[DualSample]>,
    out: &Path,
    exec: &Threaded,
) -> AppResult<()> {
    let train_set = PreparedSet::<F>::new(&run.model, train_samples, run.train.hflip)?;
    let test_set = test_samples
        .map(|s| PreparedSet::<F>::new(&run.model, s, false))
        .transpose()?;
    let (model, mut store) = DcatModel::init::<F>(&run.model)?;
    let outcome = train(&model, &mut store, &train_set, test_set.as_ref(), &run.train, exec)?;
    write_file(&out.join(METRICS_FILE), metrics_csv(&outcome.log).as_bytes())?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), run, &store)?;
    write_file(&out.join("config.txt"), run_config_to_text(run).as_bytes())?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs ({} steps); last {} loss {:.4} metric {:.4}",
            run.train.epochs, outcome.steps, last.split, last.loss, last.metric
        );
    }
    Ok(())
}

fn stored_precision(path: &Path, requested: Option<DType>) -> AppResult<DType> {
    match requested {
        Some(p) => Ok(p),
        None => Ok(load_checkpoint::<f64>(path)?.run.train.precision),
    }
}

fn cmd_eval(a: EvalArgs) -> AppResult<()> {
    match stored_precision(&a.ckpt, a.precision)? {
        DType::F32 => eval_with::<f32>(&a),
        DType::F64 => eval_with::<f64>(&a),
    }
}

fn eval_with<F: Scalar>(a: &EvalArgs) -> AppResult<()> {
    let Checkpoint { run, model, store } = load_checkpoint::<F>(&a.ckpt)?;
    let samples = read_data(&a.data, &run.model)?;
    let data = PreparedSet::<F>::new(&run.model, &samples, false)?;
    let metrics = evaluate(&model, &store, &data, &Threaded::from_env()?)?;
    let text = eval_text(&metrics);
    print!("{text}");
    if let Some(out) = &a.out {
        make_dir(out)?;
        write_file(&out.join("eval.csv"), text.as_bytes())?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> AppResult<()> {
    let base = load_run_config(a.config.as_deref())?;
    let precision = a.precision.unwrap_or(base.train.precision);
    let (train_samples, test_samples) = match &a.data {
        Some(dir) => {
            let test = a
                .test
                .as_deref()
                .ok_or_else(|| AppError::config("--test is required together with --data"))?;
            (read_data(dir, &base.model)?, read_data(test, &base.model)?)
        }
        None => {
            let spec = load_spec(a.spec.as_deref())?;
            let n_test = (a.n / 2).max(1);
            let all = generate_dataset(&spec, a.n + n_test)?.samples;
            let (tr, te) = all.split_at(a.n);
            (tr.to_vec(), te.to_vec())
        }
    };
    let presets = suite_presets(a.suite, &base.model);
    let exec = Threaded::from_env()?;
    let alphas: Vec<f64> = presets.iter().map(|p| p.config.alpha_mip).collect();
    let summaries = match precision {
        DType::F32 => summarize(&run_presets::<f32>(
            &presets,
            &a.seeds,
            &train_samples,
            &test_samples,
            &base.train,
            &exec,
            |r| eprintln!("{} seed {}: {:.4}", r.preset, r.seed, r.test.headline()),
        )?),
        DType::F64 => summarize(&run_presets::<f64>(
            &presets,
            &a.seeds,
            &train_samples,
            &test_samples,
            &base.train,
            &exec,
            |r| eprintln!("{} seed {}: {:.4}", r.preset, r.seed, r.test.headline()),
        )?),
    };
    let csv = ablation_csv(a.suite, &summaries, &alphas);
    make_dir(&a.out)?;
    write_file(&a.out.join(format!("ablation_{}.csv", a.suite.name())), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> AppResult<()> {
    let config = match (&a.config, &a.preset) {
        (_, Some(name)) => model_preset(name)?,
        (path, None) => load_run_config(path.as_deref())?.model,
    };
    print!("{}", param_report_text(&param_report(&config)?));
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> AppResult<()> {
    match stored_precision(&a.ckpt, a.precision)? {
        DType::F32 => inspect_with::<f32>(&a),
        DType::F64 => inspect_with::<f64>(&a),
    }
}

fn inspect_with<F: Scalar>(a: &InspectArgs) -> AppResult<()> {
    let Checkpoint { run, model, store } = load_checkpoint::<F>(&a.ckpt)?;
    let samples = read_data(&a.data, &run.model)?;
    let sample = match a.sample {
        Some(id) => samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| AppError::data(format!("{}: no sample with id {id}", a.data.display())))?,
        None => &samples[0],
    };
    let written = inspect(&model, &store, sample, &samples, &a.out, &Threaded::from_env()?)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

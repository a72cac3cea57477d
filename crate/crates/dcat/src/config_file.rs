//! `key = value` text files for model, training and synthetic-data settings.
//!
//! Blank lines and lines starting with `#` are ignored. Model keys are bare
//! (`d_global = 64`), training keys carry a `train.` prefix. A `preset` key
//! (`desk`, `full`, `micro`, `compact`) picks the base the other keys
//! override, wherever it appears in the file. Unknown keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use dcat_core::model::{DcatConfig, HeadCombine, RankingSource, Task};
use dcat_core::synth::SynthSpec;
use dcat_core::train::TrainConfig;
use dcat_core::vit::Branch;
use dcat_core::DType;

use crate::error::{AppError, AppResult};

/// Settings parsed from one config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: DcatConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DcatConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

pub fn model_preset(name: &str) -> AppResult<DcatConfig> {
    match name {
        "desk" => Ok(DcatConfig::desk()),
        "full" => Ok(DcatConfig::full_scale()),
        "micro" => Ok(DcatConfig::micro()),
        "compact" => Ok(DcatConfig::compact()),
        other => Err(AppError::config(format!("unknown preset '{other}'"))),
    }
}

/// Default training settings for a preset.
pub fn train_preset(name: &str) -> TrainConfig {
    match name {
        "compact" => TrainConfig::compact(),
        _ => TrainConfig::default(),
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str, &str)> + '_ {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let (k, v) = line.split_once('=').unwrap_or((line, ""));
        Some((i + 1, k.trim(), v.trim()))
    })
}

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> AppResult<T> {
    raw.parse()
        .map_err(|_| AppError::config(format!("line {line}: invalid value '{raw}' for key '{key}'")))
}

fn flag(key: &str, raw: &str, line: usize) -> AppResult<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(AppError::config(format!("line {line}: invalid value '{raw}' for key '{key}'"))),
    }
}

fn check_pairs(text: &str) -> AppResult<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if !line.is_empty() && !line.starts_with('#') && !line.contains('=') {
            return Err(AppError::config(format!("line {}: expected key = value, got '{line}'", i + 1)));
        }
    }
    Ok(())
}

pub fn parse_run_config(text: &str) -> AppResult<RunConfig> {
    check_pairs(text)?;
    let preset = lines(text).filter(|(_, k, _)| *k == "preset").last();
    let mut cfg = match preset {
        Some((_, _, name)) => RunConfig {
            model: model_preset(name)?,
            train: train_preset(name),
        },
        None => RunConfig::default(),
    };
    let mut num_classes = None;
    let mut regression = None;
    for (line, key, raw) in lines(text) {
        let m = &mut cfg.model;
        let t = &mut cfg.train;
        match key {
            "preset" => {}
            "global_side" => m.global_side = value(key, raw, line)?,
            "mip_side" => m.mip_side = value(key, raw, line)?,
            "global_patch" => m.global_patch = value(key, raw, line)?,
            "mip_patch" => m.mip_patch = value(key, raw, line)?,
            "d_global" => m.d_global = value(key, raw, line)?,
            "d_mip" => m.d_mip = value(key, raw, line)?,
            "heads_global" => m.heads_global = value(key, raw, line)?,
            "heads_mip" => m.heads_mip = value(key, raw, line)?,
            "depth_global" => m.depth_global = value(key, raw, line)?,
            "depth_mip" => m.depth_mip = value(key, raw, line)?,
            "rounds" => m.rounds = value(key, raw, line)?,
            "layers" => m.layers = value(key, raw, line)?,
            "alpha_global" => m.alpha_global = value(key, raw, line)?,
            "alpha_mip" => m.alpha_mip = value(key, raw, line)?,
            "num_classes" => num_classes = Some(value(key, raw, line)?),
            "task" => {
                regression = Some(match raw {
                    "classification" => false,
                    "regression" => true,
                    _ => return Err(AppError::config(format!("line {line}: invalid value '{raw}' for key 'task'"))),
                })
            }
            "dual_input" => m.dual_input = flag(key, raw, line)?,
            "single_branch" => {
                m.single_branch = match raw {
                    "global" => Branch::Global,
                    "mip" => Branch::Mip,
                    _ => return Err(AppError::config(format!("line {line}: invalid value '{raw}' for key '{key}'"))),
                }
            }
            "cpa_enabled" => m.cpa_enabled = flag(key, raw, line)?,
            "ranking_enabled" => m.ranking_enabled = flag(key, raw, line)?,
            "cca_mode" => m.cca_mode = flag(key, raw, line)?,
            "head_combine" => {
                m.head_combine = match raw {
                    "concat" => HeadCombine::Concat,
                    "sum" => HeadCombine::Sum,
                    _ => return Err(AppError::config(format!("line {line}: invalid value '{raw}' for key '{key}'"))),
                }
            }
            "ranking_source" => {
                m.ranking_source = match raw {
                    "encoder" => RankingSource::Encoder,
                    "dedicated" => RankingSource::Dedicated,
                    _ => return Err(AppError::config(format!("line {line}: invalid value '{raw}' for key '{key}'"))),
                }
            }
            "seed" => m.seed = value(key, raw, line)?,
            "train.epochs" => t.epochs = value(key, raw, line)?,
            "train.warmup_epochs" => t.warmup_epochs = value(key, raw, line)?,
            "train.batch_size" => t.batch_size = value(key, raw, line)?,
            "train.base_lr" => t.base_lr = value(key, raw, line)?,
            "train.weight_decay" => t.weight_decay = value(key, raw, line)?,
            "train.seed" => t.seed = value(key, raw, line)?,
            "train.precision" => t.precision = parse_precision(raw).map_err(|e| AppError::config(format!("line {line}: {e}")))?,
            "train.hflip" => t.hflip = flag(key, raw, line)?,
            other => return Err(AppError::config(format!("line {line}: unknown key '{other}'"))),
        }
    }
    let classes = num_classes.unwrap_or(match cfg.model.task {
        Task::Classification { num_classes } => num_classes,
        Task::Regression => 3,
    });
    cfg.model.task = match regression {
        Some(true) => Task::Regression,
        Some(false) => Task::Classification { num_classes: classes },
        None => match cfg.model.task {
            Task::Regression if num_classes.is_none() => Task::Regression,
            _ => Task::Classification { num_classes: classes },
        },
    };
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn parse_precision(raw: &str) -> Result<DType, String> {
    match raw {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(format!("unknown precision '{other}' (expected f32 or f64)")),
    }
}

pub fn precision_name(p: DType) -> &'static str {
    match p {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

/// Every model key, in a fixed order.
pub fn model_to_text(m: &DcatConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("global_side", m.global_side.to_string());
    put("mip_side", m.mip_side.to_string());
    put("global_patch", m.global_patch.to_string());
    put("mip_patch", m.mip_patch.to_string());
    put("d_global", m.d_global.to_string());
    put("d_mip", m.d_mip.to_string());
    put("heads_global", m.heads_global.to_string());
    put("heads_mip", m.heads_mip.to_string());
    put("depth_global", m.depth_global.to_string());
    put("depth_mip", m.depth_mip.to_string());
    put("rounds", m.rounds.to_string());
    put("layers", m.layers.to_string());
    put("alpha_global", m.alpha_global.to_string());
    put("alpha_mip", m.alpha_mip.to_string());
    match m.task {
        Task::Classification { num_classes } => {
            put("task", "classification".into());
            put("num_classes", num_classes.to_string());
        }
        Task::Regression => put("task", "regression".into()),
    }
    put("dual_input", m.dual_input.to_string());
    put("single_branch", m.single_branch.name().into());
    put("cpa_enabled", m.cpa_enabled.to_string());
    put("ranking_enabled", m.ranking_enabled.to_string());
    put("cca_mode", m.cca_mode.to_string());
    put(
        "head_combine",
        match m.head_combine {
            HeadCombine::Concat => "concat",
            HeadCombine::Sum => "sum",
        }
        .into(),
    );
    put(
        "ranking_source",
        match m.ranking_source {
            RankingSource::Encoder => "encoder",
            RankingSource::Dedicated => "dedicated",
        }
        .into(),
    );
    put("seed", m.seed.to_string());
    s
}

pub fn run_config_to_text(c: &RunConfig) -> String {
    let mut s = model_to_text(&c.model);
    let t = &c.train;
    let _ = writeln!(s, "train.epochs = {}", t.epochs);
    let _ = writeln!(s, "train.warmup_epochs = {}", t.warmup_epochs);
    let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
    let _ = writeln!(s, "train.base_lr = {}", t.base_lr);
    let _ = writeln!(s, "train.weight_decay = {}", t.weight_decay);
    let _ = writeln!(s, "train.seed = {}", t.seed);
    let _ = writeln!(s, "train.precision = {}", precision_name(t.precision));
    let _ = writeln!(s, "train.hflip = {}", t.hflip);
    s
}

/// Synthetic-data spec: `scene_side`, `mip_box_side`, `frame_width`,
/// `p_scene`, `p_mip`, `noise`, `distractors_min`, `distractors_max`,
/// `regression`, `seed`, `num_classes`, plus `preset = compact`.
pub fn parse_synth_spec(text: &str) -> AppResult<SynthSpec> {
    check_pairs(text)?;
    let mut s = match lines(text).filter(|(_, k, _)| *k == "preset").last() {
        Some((_, _, "compact")) => SynthSpec::compact(),
        Some((_, _, "desk")) | None => SynthSpec::default(),
        Some((line, _, other)) => return Err(AppError::config(format!("line {line}: unknown preset '{other}'"))),
    };
    for (line, key, raw) in lines(text) {
        match key {
            "preset" => {}
            "num_classes" => s.num_classes = value(key, raw, line)?,
            "scene_side" => s.scene_side = value(key, raw, line)?,
            "mip_box_side" => s.mip_box_side = value(key, raw, line)?,
            "frame_width" => s.frame_width = value(key, raw, line)?,
            "p_scene" => s.p_scene = value(key, raw, line)?,
            "p_mip" => s.p_mip = value(key, raw, line)?,
            "noise" => s.noise = value(key, raw, line)?,
            "distractors_min" => s.distractors.0 = value(key, raw, line)?,
            "distractors_max" => s.distractors.1 = value(key, raw, line)?,
            "regression" => s.regression = flag(key, raw, line)?,
            "seed" => s.seed = value(key, raw, line)?,
            other => return Err(AppError::config(format!("line {line}: unknown key '{other}'"))),
        }
    }
    s.validate()?;
    Ok(s)
}

pub fn synth_spec_to_text(s: &SynthSpec) -> String {
    format!(
        "num_classes = {}\nscene_side = {}\nmip_box_side = {}\nframe_width = {}\np_scene = {}\np_mip = {}\nnoise = {}\ndistractors_min = {}\ndistractors_max = {}\nregression = {}\nseed = {}\n",
        s.num_classes,
        s.scene_side,
        s.mip_box_side,
        s.frame_width,
        s.p_scene,
        s.p_mip,
        s.noise,
        s.distractors.0,
        s.distractors.1,
        s.regression,
        s.seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorKind;

    #[test]
    fn preset_applies_before_overrides() {
        let c = parse_run_config("d_global = 16\n# comment\npreset = micro\n\ntrain.epochs = 5\ntrain.warmup_epochs = 1\n").unwrap();
        assert_eq!(c.model.d_global, 16);
        assert_eq!(c.model.global_side, 24);
        assert_eq!(c.train.epochs, 5);
    }

    #[test]
    fn errors_name_the_key() {
        let e = parse_run_config("preset = micro\nwidth = 3\n").unwrap_err();
        assert_eq!(e.kind, ErrorKind::Config);
        assert!(e.message.contains("width") && e.message.contains("line 2"));
        let e = parse_run_config("alpha_mip = lots\n").unwrap_err();
        assert!(e.message.contains("alpha_mip"));
        assert!(parse_run_config("just words\n").is_err());
        assert_eq!(parse_run_config("preset = micro\nglobal_side = 25\n").unwrap_err().kind, ErrorKind::Config);
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig {
            model: DcatConfig::full_scale(),
            train: TrainConfig::default(),
        };
        c.model.task = Task::Regression;
        c.model.ranking_source = RankingSource::Dedicated;
        c.train.precision = DType::F64;
        assert_eq!(parse_run_config(&run_config_to_text(&c)).unwrap(), c);
        let s = SynthSpec {
            regression: true,
            noise: 0.125,
            ..SynthSpec::compact()
        };
        assert_eq!(parse_synth_spec(&synth_spec_to_text(&s)).unwrap(), s);
    }
}

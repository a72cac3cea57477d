//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{class_scores, cross_direction, kernel_cka, linear, norm, orthogonal, random_mat, randomize, rel_error, top_rows, Mat};
use dcat::exec::Threaded;
use dcat_core::cka::linear_cka;
use dcat_core::cpa::{cpa_direction, CrossAttention, Ranker};
use dcat_core::model::{box_patches, DcatConfig, ModelInput};
use dcat_core::ranking::select_top;
use dcat_core::record::AttentionRecord;
use dcat_core::synth::{generate_dataset, DualSample, SynthSpec};
use dcat_core::train::{dual_cca, dual_cpa, dual_cpa_ranking, global_only, mip_only, run_presets, summarize, Preset, PresetRun, TrainConfig};
use dcat_core::vit::{Branch, EncoderBlock, TokenBatch};
use dcat_core::{DcatModel, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let config = DcatConfig::micro();
    let spec = SynthSpec {
        scene_side: 48,
        mip_box_side: 16,
        seed: 4,
        ..SynthSpec::default()
    };
    let sample = generate_dataset(&spec, 1).unwrap().samples.remove(0);
    let (model, mut store) = DcatModel::init::<f64>(&config).unwrap();
    randomize(&mut store, 17, 0.3);
    let input = model.prepare::<f64>(&sample).unwrap();
    let loss = |s: &ParamStore<f64>| {
        let mut tape = Tape::with_params(s);
        let out = model.forward(&mut tape, &input, None).unwrap();
        let l = model.loss(&mut tape, out, &sample.label).unwrap();
        tape.value(l).data()[0]
    };
    let grads = {
        let mut tape = Tape::with_params(&store);
        let out = model.forward(&mut tape, &input, None).unwrap();
        let l = model.loss(&mut tape, out, &sample.label).unwrap();
        tape.backward(l).unwrap()
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    let mut scalars = 0;
    for id in ids {
        let n = store.value(id).numel();
        let analytic = grads.param(id).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; n]);
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + H;
            let up = loss(&store);
            store.value_mut(id).data_mut()[i] = orig - H;
            let down = loss(&store);
            store.value_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        scalars += n;
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    let t = start.elapsed();
    check(
        worst < 1e-4 && t < Duration::from_secs(60),
        format!("{scalars} parameters, worst relative error {worst:.2e}, {:.1} s", t.as_secs_f64()),
    )
}

fn param_count() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_dcat")).args(["params", "--preset", "full"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    let total: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("total,"))
        .ok_or("no total line")?
        .trim()
        .parse()
        .map_err(|e| format!("{e}"))?;
    let target = 26.70e6;
    let dev = (total - target) / target;
    check(
        out.status.success() && dev.abs() <= 0.05 && start.elapsed() < Duration::from_secs(5),
        format!("total {total} vs {target}, deviation {:+.1}%", 100.0 * dev),
    )
}

struct Suite {
    runs: Vec<PresetRun<f32>>,
    test: Vec<DualSample>,
    elapsed: Duration,
}

impl Suite {
    fn mean(&self, preset: &str) -> f64 {
        summarize(&self.runs).into_iter().find(|s| s.preset == preset).map(|s| s.mean).unwrap()
    }
}

fn train_suite() -> Suite {
    let base = DcatConfig::compact();
    let presets = [
        ("global-only", global_only(&base)),
        ("mip-only", mip_only(&base)),
        ("dual+CCA", dual_cca(&base)),
        ("dual+CPA", dual_cpa(&base)),
        ("dual+CPA+ranking", dual_cpa_ranking(&base)),
    ]
    .map(|(name, config)| Preset {
        name: name.into(),
        config,
    });
    let spec = SynthSpec { seed: 2024, ..SynthSpec::compact() };
    let all = generate_dataset(&spec, 1800).unwrap().samples;
    let (train, test) = all.split_at(1200);
    let exec = Threaded::from_env().unwrap();
    let start = Instant::now();
    let runs = run_presets::<f32>(&presets, &[0, 1, 2], train, test, &TrainConfig::compact(), &exec, |r| {
        eprintln!("  {} seed {}: test accuracy {:.4}", r.preset, r.seed, r.test.headline())
    })
    .unwrap();
    Suite {
        runs,
        test: test.to_vec(),
        elapsed: start.elapsed(),
    }
}

fn dual_ordering(s: &Suite) -> Outcome {
    let (g, m, d) = (s.mean("global-only"), s.mean("mip-only"), s.mean("dual+CPA+ranking"));
    let mins = s.elapsed.as_secs_f64() / 60.0;
    check(
        d - g >= 0.03 && d - m >= 0.03 && mins < 30.0,
        format!("dual {d:.4}, global-only {g:.4}, mip-only {m:.4}; suite took {mins:.1} min"),
    )
}

fn cpa_vs_cca(s: &Suite) -> Outcome {
    let (cpa, cca) = (s.mean("dual+CPA+ranking"), s.mean("dual+CCA"));
    check(cpa >= cca - 0.005 && cpa > cca, format!("CPA {cpa:.4} vs CCA {cca:.4}"))
}

fn module_ladder(s: &Suite) -> Outcome {
    let mut ladder: Vec<(&str, f64)> = ["global-only", "dual+CCA", "dual+CPA", "dual+CPA+ranking"]
        .iter()
        .map(|&p| (p, s.mean(p)))
        .collect();
    ladder.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let rank = ladder.iter().position(|(p, _)| *p == "dual+CPA+ranking").unwrap();
    let table: Vec<String> = ladder.iter().map(|(p, v)| format!("{p} {v:.4}")).collect();
    check(rank < 2, format!("rank {} of 4: {}", rank + 1, table.join(", ")))
}

fn keep_localization(s: &Suite) -> Outcome {
    let mut recall = 0.0;
    let mut chance = 0.0;
    let mut count = 0;
    for run in s.runs.iter().filter(|r| r.preset == "dual+CPA+ranking") {
        let config = &run.model.config;
        let n = (config.global_side / config.global_patch).pow(2);
        for sample in &s.test[..100] {
            let input = run.model.prepare::<f32>(sample).unwrap();
            let mut tape = Tape::with_params(&run.store);
            let mut record = AttentionRecord::new();
            run.model.forward(&mut tape, &input, Some(&mut record)).unwrap();
            let target = box_patches(config, sample);
            recall += record.keep_recall(Branch::Global, &target).unwrap();
            chance += record.rounds[0].global.kept.len() as f64 / n as f64;
            count += 1;
        }
    }
    let (recall, chance) = (recall / count as f64, chance / count as f64);
    check(
        recall >= 1.2 * chance,
        format!("box recall {recall:.4} vs chance {chance:.4} (x{:.2}) over {count} image-runs", recall / chance),
    )
}

fn ranking_identity() -> Outcome {
    let base = DcatConfig {
        alpha_global: 1.0,
        alpha_mip: 1.0,
        ..DcatConfig::micro()
    };
    let (ranked, mut store) = DcatModel::init::<f64>(&base).unwrap();
    randomize(&mut store, 3, 0.3);
    let plain = DcatModel::new(&DcatConfig { ranking_enabled: false, ..base }, &mut ParamStore::<f64>::new(0)).unwrap();
    let spec = SynthSpec {
        scene_side: 48,
        mip_box_side: 16,
        seed: 77,
        ..SynthSpec::default()
    };
    let logits = |m: &DcatModel, input: &ModelInput<f64>| {
        let mut tape = Tape::with_params(&store);
        let out = m.forward(&mut tape, input, None).unwrap();
        Mat::of(tape.value(out))
    };
    let mut worst: f64 = 0.0;
    for s in generate_dataset(&spec, 100).unwrap().samples {
        let input = ranked.prepare::<f64>(&s).unwrap();
        worst = worst.max(logits(&ranked, &input).max_diff(&logits(&plain, &input)));
    }
    check(worst < 1e-6, format!("max logit difference {worst:.2e} over 100 samples"))
}

fn top_k_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ties = 0;
    for draw in 0..10_000 {
        let n = rng.random_range(1..=12);
        let scores: Vec<f64> = if draw % 2 == 0 {
            (0..n).map(|_| rng.random_range(0..4) as f64 / 4.0).collect()
        } else {
            (0..n).map(|_| rng.random::<f64>()).collect()
        };
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        ties += usize::from(sorted.len() < n);
        let alpha = match draw % 3 {
            0 => [0.25, 0.5, 0.75, 1.0][rng.random_range(0..4)],
            _ => rng.random_range(0.01..=1.0),
        };
        let got = select_top(&scores, alpha).map_err(|e| e.to_string())?.kept;
        let want = top_rows(&scores, alpha);
        if got != want {
            return Err(format!("draw {draw}: {scores:?} alpha {alpha}: {got:?} vs {want:?}"));
        }
    }
    Ok(format!("10000 draws agree, {ties} with ties"))
}

fn cpa_formula() -> Outcome {
    let mut store = ParamStore::<f64>::new(0);
    let attn = CrossAttention::new(&mut store, "x", 4, 6, 2);
    let block = EncoderBlock::new(&mut store, "rank", 4, 2).unwrap();
    randomize(&mut store, 21, 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let src = random_mat(&mut rng, 5, 4);
    let dst = random_mat(&mut rng, 4, 6);
    let mut worst: f64 = 0.0;
    for (use_block, alpha) in [(false, 0.5), (true, 0.5), (true, 0.25), (false, 1.0)] {
        let mut tape = Tape::with_params(&store);
        let batch = |tape: &mut Tape<'_, f64>, m: &Mat, branch| TokenBatch {
            tokens: tape.leaf(m.tensor()),
            origin: (0..m.r).collect(),
            branch,
        };
        let s = batch(&mut tape, &src, Branch::Global);
        let d = batch(&mut tape, &dst, Branch::Mip);
        let ranker = if use_block { Ranker::from_block(&block) } else { Ranker::Identity { heads: 2 } };
        let out = cpa_direction(&mut tape, &s, &d, &attn, ranker, Some(alpha), None).map_err(|e| e.to_string())?;
        let scores = if use_block {
            let h = norm(&src, &store, "rank.norm1");
            class_scores(&linear(&h, &store, "rank.wq"), &linear(&h, &store, "rank.wk"), 2)
        } else {
            class_scores(&src, &src, 2)
        };
        let want = cross_direction(&src, &dst, &top_rows(&scores, alpha), &store, "x", 2);
        worst = worst.max(Mat::of(tape.value(out.tokens)).max_diff(&want));
    }
    check(worst < 1e-10, format!("max deviation {worst:.2e} over 4 ranker/alpha settings"))
}

fn cka_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cka = |x: &Mat, y: &Mat| linear_cka(&x.tensor(), &y.tensor()).unwrap().value;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(3..16);
        let (p, q) = (rng.random_range(1..8), rng.random_range(1..8));
        let x = random_mat(&mut rng, n, p);
        let y = random_mat(&mut rng, n, q);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let moved = x.mul(&orthogonal(&mut rng, p));
        let moved = Mat::new(n, p, moved.d.iter().map(|v| scale * v).collect());
        let base = cka(&x, &y);
        for err in [
            (cka(&x, &x) - 1.0).abs(),
            (cka(&moved, &y) - base).abs(),
            (cka(&x, &moved) - 1.0).abs(),
            (base - kernel_cka(&x, &y)).abs(),
        ] {
            worst = worst.max(err);
        }
    }
    check(worst < 1e-8, format!("200 random pairs, max deviation {worst:.2e}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let dcat = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_dcat")).args(args).env("DCAT_THREADS", "1").output().unwrap();
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    };
    fs::write(path("spec.txt"), "preset = compact\nseed = 9\n").unwrap();
    fs::write(
        path("config.txt"),
        "preset = compact\ntrain.precision = f64\ntrain.epochs = 3\ntrain.warmup_epochs = 1\nseed = 5\n",
    )
    .unwrap();
    dcat(&["generate", "--spec", &path("spec.txt"), "--n", "64", "--out", &path("data")])?;
    for run in ["a", "b"] {
        dcat(&["train", "--config", &path("config.txt"), "--data", &path("data"), "--out", &path(run)])?;
    }
    let mut same = true;
    let mut sizes = Vec::new();
    for f in ["checkpoint.dcat", "metrics.csv"] {
        let (a, b) = (fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
        same &= a == b;
        sizes.push(format!("{f} {} bytes", a.len()));
    }
    check(same, format!("{} identical: {same}", sizes.join(", ")))
}

fn run(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(d) => println!("PASS  {label}: {d} [{secs:.1} s]"),
        Err(d) => println!("FAIL  {label}: {d} [{secs:.1} s]"),
    }
    result.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= run(" 1 gradient check", gradient_check);
    ok &= run(" 2 parameter count", param_count);
    eprintln!("training 5 presets x 3 seeds on the compact task");
    let suite = catch_unwind(train_suite).ok();
    let suite = suite.as_ref();
    let with = |f: fn(&Suite) -> Outcome| move || suite.map_or(Err("training suite panicked".into()), f);
    ok &= run(" 3 dual input ordering", with(dual_ordering));
    ok &= run(" 4 CPA vs CCA", with(cpa_vs_cca));
    ok &= run(" 5 module ladder", with(module_ladder));
    ok &= run(" 6 ranking identity", ranking_identity);
    ok &= run(" 7 top-k oracle", top_k_oracle);
    ok &= run(" 8 CPA formula oracle", cpa_formula);
    ok &= run(" 9 CKA invariances", cka_invariances);
    ok &= run("10 keep-mask localization", with(keep_localization));
    ok &= run("11 determinism", determinism);
    if !ok {
        std::process::exit(1);
    }
}

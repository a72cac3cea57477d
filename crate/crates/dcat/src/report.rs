//! CSV outputs: metric logs, ablation comparisons, CKA curves, parameter reports.

use std::fmt::Write as _;

use dcat_core::cka::LayerCka;
use dcat_core::model::ParamReport;
use dcat_core::train::{ConfusionMatrix, EpochLog, EvalMetrics, PresetSummary, Suite};

pub const METRICS_HEADER: &str = "epoch,split,loss,metric";

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in log {
        let _ = writeln!(s, "{},{},{:.9e},{:.9e}", r.epoch, r.split, r.loss, r.metric);
    }
    s
}

/// `preset,mean,std,seeds,scores`, with `alpha_mip,drop_ratio` inserted after
/// `preset` for the keep-ratio sweep. Scores are `;`-separated.
pub fn ablation_csv(suite: Suite, summaries: &[PresetSummary], alphas: &[f64]) -> String {
    let sweep = suite == Suite::Fig3;
    let mut s = String::from(if sweep {
        "preset,alpha_mip,drop_ratio,mean,std,seeds,scores\n"
    } else {
        "preset,mean,std,seeds,scores\n"
    });
    for (i, p) in summaries.iter().enumerate() {
        let scores: Vec<String> = p.scores.iter().map(|v| format!("{v:.6}")).collect();
        let _ = write!(s, "{}", p.preset);
        if sweep {
            let a = alphas.get(i).copied().unwrap_or(f64::NAN);
            let _ = write!(s, ",{a},{}", 1.0 - a);
        }
        let _ = writeln!(s, ",{:.6},{:.6},{},{}", p.mean, p.std, p.scores.len(), scores.join(";"));
    }
    s
}

pub fn cka_csv(points: &[LayerCka]) -> String {
    let mut s = String::from("layer,branch,cka,degenerate\n");
    for p in points {
        let _ = writeln!(s, "{},{},{:.9},{}", p.layer, p.branch.name(), p.cka.value, p.cka.degenerate);
    }
    s
}

pub fn param_report_text(report: &ParamReport) -> String {
    let mut s = String::from("module,params\n");
    for (m, n) in &report.modules {
        let _ = writeln!(s, "{m},{n}");
    }
    let _ = writeln!(s, "total,{}", report.total);
    s
}

pub fn confusion_text(cm: &ConfusionMatrix) -> String {
    let k = cm.classes;
    let mut s = String::from("true\\pred");
    for p in 0..k {
        let _ = write!(s, ",{p}");
    }
    s.push('\n');
    for t in 0..k {
        let _ = write!(s, "{t}");
        for p in 0..k {
            let _ = write!(s, ",{}", cm.get(t, p));
        }
        s.push('\n');
    }
    s
}

pub fn eval_text(m: &EvalMetrics) -> String {
    let mut s = format!("samples,{}\nloss,{:.9e}\n", m.samples, m.loss);
    if let Some(a) = m.accuracy {
        let _ = writeln!(s, "accuracy,{a:.6}");
    }
    if let Some(e) = m.mse {
        let _ = writeln!(s, "mse,{e:.9e}");
    }
    if let Some(cm) = &m.confusion {
        s.push_str(&confusion_text(cm));
    }
    s
}

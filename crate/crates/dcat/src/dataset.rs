//! Dataset directories: `images/*.ppm` plus a tab-separated `manifest.tsv`
//! with columns `id path x y w h label`. Paths are relative to the directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dcat_core::image::BoxRegion;
use dcat_core::model::Task;
use dcat_core::synth::{DualSample, Label};

use crate::error::{AppError, AppResult, ErrorKind};
use crate::netpbm::{decode_ppm, encode_ppm};

pub const MANIFEST: &str = "manifest.tsv";
pub const HEADER: &str = "id\tpath\tx\ty\tw\th\tlabel";

fn label_text(label: &Label) -> String {
    match label {
        Label::Class(k) => k.to_string(),
        Label::Score(s) => format!("{s:?}"),
    }
}

pub fn manifest_text(samples: &[DualSample]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for d in samples {
        let b = d.mip_box;
        let _ = writeln!(
            s,
            "{}\timages/{:06}.ppm\t{}\t{}\t{}\t{}\t{}",
            d.id,
            d.id,
            b.x,
            b.y,
            b.w,
            b.h,
            label_text(&d.label)
        );
    }
    s
}

pub fn write_dataset(dir: &Path, samples: &[DualSample]) -> AppResult<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| AppError::io(ErrorKind::Other, &images, e))?;
    for d in samples {
        let path = images.join(format!("{:06}.ppm", d.id));
        fs::write(&path, encode_ppm(&d.image)).map_err(|e| AppError::io(ErrorKind::Other, &path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest_text(samples)).map_err(|e| AppError::io(ErrorKind::Other, &path, e))
}

fn parse_label(raw: &str, task: Task) -> Option<Label> {
    match task {
        Task::Classification { num_classes } => raw.parse().ok().filter(|&k| k < num_classes).map(Label::Class),
        Task::Regression => raw.parse().ok().filter(|s: &f64| s.is_finite()).map(Label::Score),
    }
}

/// Reads and validates every sample. An empty manifest is an error.
pub fn read_dataset(dir: &Path, task: Task) -> AppResult<Vec<DualSample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| AppError::io(ErrorKind::Data, &path, e))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line == HEADER) {
            continue;
        }
        let bad = |what: &str| AppError::data(format!("{}: line {}: {what}", path.display(), i + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(bad("expected 7 tab-separated columns"));
        }
        let num = |j: usize| cols[j].parse::<usize>().map_err(|_| bad(&format!("invalid number '{}'", cols[j])));
        let id = cols[0].parse::<u64>().map_err(|_| bad("invalid id"))?;
        let mip_box = BoxRegion::new(num(2)?, num(3)?, num(4)?, num(5)?);
        let label = parse_label(cols[6], task).ok_or_else(|| bad(&format!("invalid label '{}'", cols[6])))?;
        let image_path = dir.join(cols[1]);
        let bytes = fs::read(&image_path).map_err(|e| AppError::io(ErrorKind::Data, &image_path, e))?;
        let image = decode_ppm(&bytes).map_err(|e| e.at(&image_path))?;
        let sample = DualSample {
            id,
            image,
            mip_box,
            label,
        };
        sample
            .validate()
            .map_err(|e| bad(&format!("sample {id}: {}", AppError::from(e))))?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(AppError::data(format!("{}: dataset is empty", path.display())));
    }
    Ok(samples)
}

//! Diagnostic artifacts for one sample: keep-masks, attention overlays and
//! per-block CKA against the final class token.

use std::fs;
use std::path::{Path, PathBuf};

use dcat_core::cka::layer_profile;
use dcat_core::image::RgbImage;
use dcat_core::model::{DcatConfig, DcatModel};
use dcat_core::record::AttentionRecord;
use dcat_core::synth::DualSample;
use dcat_core::train::Executor;
use dcat_core::vit::Branch;
use dcat_core::{ParamStore, Scalar, Tape};

use crate::error::{AppError, AppResult, ErrorKind};
use crate::netpbm::{encode_pgm, encode_ppm, GrayImage};
use crate::report::cka_csv;

/// Number of held-out samples used for the CKA curve.
pub const CKA_SAMPLES: usize = 256;

pub fn record_sample<F: Scalar>(model: &DcatModel, store: &ParamStore<F>, sample: &DualSample) -> AppResult<AttentionRecord> {
    sample.validate()?;
    let input = model.prepare::<F>(sample)?;
    let mut tape = Tape::with_params(store);
    let mut record = AttentionRecord::new();
    model.forward(&mut tape, &input, Some(&mut record))?;
    Ok(record)
}

fn grid(config: &DcatConfig, branch: Branch) -> usize {
    match branch {
        Branch::Global => config.global_side / config.global_patch,
        Branch::Mip => config.mip_side / config.mip_patch,
    }
}

/// `grid x grid` bitmap, 255 where the patch was kept as a query.
pub fn keep_mask(grid: usize, kept: &[usize]) -> GrayImage {
    let mut data = vec![0u8; grid * grid];
    for &k in kept {
        if (1..=grid * grid).contains(&k) {
            data[k - 1] = 255;
        }
    }
    GrayImage {
        width: grid,
        height: grid,
        data,
    }
}

/// Red-over-gray heat map. `heat` holds one value per patch of a
/// `grid x grid` layout, upsampled by nearest neighbour to the image size
/// and normalized by its maximum.
pub fn heat_overlay(image: &RgbImage, grid: usize, heat: &[f64]) -> AppResult<RgbImage> {
    if heat.len() != grid * grid {
        return Err(AppError::other(format!("heat map has {} values for a {grid}x{grid} grid", heat.len())));
    }
    let peak = heat.iter().cloned().fold(0.0f64, f64::max);
    let (w, h) = (image.width(), image.height());
    let luma = image.luma();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let cell = (y * grid / h) * grid + x * grid / w;
            let t = if peak > 0.0 { (heat[cell] / peak).clamp(0.0, 1.0) } else { 0.0 };
            let gray = luma[y * w + x].clamp(0.0, 255.0);
            let red = gray + t * (255.0 - gray);
            data.extend_from_slice(&[red.round() as u8, gray.round() as u8, gray.round() as u8]);
        }
    }
    Ok(RgbImage::new(w, h, data)?)
}

/// Class-token attention over patches in the branch's last encoder block.
fn class_heat(record: &AttentionRecord, branch: Branch) -> Option<Vec<f64>> {
    record.blocks_of(branch).last().map(|b| b.class_row[1..].to_vec())
}

fn write(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> AppResult<()> {
    fs::write(&path, bytes).map_err(|e| AppError::io(ErrorKind::Other, &path, e))?;
    written.push(path);
    Ok(())
}

/// Writes every artifact into `out`, returning the paths in write order.
/// `holdout` supplies the CKA batch (at most `CKA_SAMPLES` are used).
pub fn inspect<F: Scalar>(
    model: &DcatModel,
    store: &ParamStore<F>,
    sample: &DualSample,
    holdout: &[DualSample],
    out: &Path,
    exec: &impl Executor,
) -> AppResult<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| AppError::io(ErrorKind::Other, out, e))?;
    let config = &model.config;
    let record = record_sample(model, store, sample)?;
    let mut written = Vec::new();
    for r in &record.rounds {
        for d in [&r.global, &r.mip] {
            let mask = keep_mask(grid(config, d.branch), &d.kept);
            let name = format!("keep_{}_layer{}_round{}.pgm", d.branch.name(), r.layer, r.round);
            write(out.join(name), &encode_pgm(&mask), &mut written)?;
        }
    }
    for branch in [Branch::Global, Branch::Mip] {
        let Some(heat) = class_heat(&record, branch) else {
            continue;
        };
        let base = match branch {
            Branch::Global => sample.image.clone(),
            Branch::Mip => sample.image.crop(&sample.mip_box)?,
        };
        let img = heat_overlay(&base, grid(config, branch), &heat)?;
        write(out.join(format!("overlay_{}.ppm", branch.name())), &encode_ppm(&img), &mut written)?;
    }
    let batch = &holdout[..holdout.len().min(CKA_SAMPLES)];
    let records: Vec<AttentionRecord> = exec
        .run(batch.len(), &|i| record_sample(model, store, &batch[i]))
        .into_iter()
        .collect::<AppResult<_>>()?;
    let mut points = Vec::new();
    for branch in [Branch::Global, Branch::Mip] {
        if config.uses(branch) && !records.is_empty() {
            points.extend(layer_profile(&records, branch)?);
        }
    }
    write(out.join("cka.csv"), cka_csv(&points).as_bytes(), &mut written)?;
    Ok(written)
}

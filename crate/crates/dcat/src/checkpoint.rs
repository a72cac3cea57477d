//! Checkpoints: one archive entry per parameter plus the run config as text.

use std::fs;
use std::path::Path;

use dcat_core::{DType, DcatModel, ParamStore, Scalar, Tensor};

use crate::archive::{self, Entry, EntryData};
use crate::config_file::{parse_run_config, run_config_to_text, RunConfig};
use crate::error::{AppError, AppResult, ErrorKind};

pub const CONFIG_ENTRY: &str = "__config__";

pub fn checkpoint_bytes<F: Scalar>(run: &RunConfig, store: &ParamStore<F>) -> AppResult<Vec<u8>> {
    let text = run_config_to_text(run).into_bytes();
    let mut entries = vec![Entry::new(CONFIG_ENTRY, vec![text.len()], EntryData::U8(text))?];
    for (_, p) in store.iter() {
        let data = match p.value.dtype() {
            DType::F32 => EntryData::F32(p.value.data().iter().map(|v| v.widen() as f32).collect()),
            DType::F64 => EntryData::F64(p.value.to_f64_vec()),
        };
        entries.push(Entry::new(p.name.clone(), p.value.shape().to_vec(), data)?);
    }
    Ok(archive::to_bytes(&entries))
}

pub fn save_checkpoint<F: Scalar>(path: &Path, run: &RunConfig, store: &ParamStore<F>) -> AppResult<()> {
    fs::write(path, checkpoint_bytes(run, store)?).map_err(|e| AppError::io(ErrorKind::Other, path, e))
}

/// A loaded checkpoint with parameters converted to `F`.
pub struct Checkpoint<F> {
    pub run: RunConfig,
    pub model: DcatModel,
    pub store: ParamStore<F>,
}

pub fn checkpoint_from_bytes<F: Scalar>(bytes: &[u8]) -> AppResult<Checkpoint<F>> {
    let entries = archive::from_bytes(bytes)?;
    let text = entries
        .iter()
        .find(|e| e.name == CONFIG_ENTRY)
        .and_then(|e| match &e.data {
            EntryData::U8(b) => std::str::from_utf8(b).ok(),
            _ => None,
        })
        .ok_or_else(|| AppError::data("checkpoint has no readable config entry"))?;
    let run = parse_run_config(text)?;
    let (model, mut store) = DcatModel::init::<F>(&run.model)?;
    let mut seen = 0;
    for e in entries.iter().filter(|e| e.name != CONFIG_ENTRY) {
        let id = store
            .find(&e.name)
            .ok_or_else(|| AppError::data(format!("checkpoint parameter '{}' is not part of the model", e.name)))?;
        let values: Vec<f64> = match &e.data {
            EntryData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            EntryData::F64(v) => v.clone(),
            EntryData::U8(_) => return Err(AppError::data(format!("checkpoint parameter '{}' is not float", e.name))),
        };
        let t = Tensor::<F>::from_f64(&e.shape, &values)?;
        store
            .set_value(id, t)
            .map_err(|_| AppError::data(format!("checkpoint parameter '{}' has shape {:?}", e.name, e.shape)))?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(AppError::data(format!("checkpoint has {seen} of {} parameters", store.len())));
    }
    Ok(Checkpoint { run, model, store })
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> AppResult<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| AppError::io(ErrorKind::Data, path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|e| e.at(path))
}

//! Binary container for models and resumable training checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the JSON
//! manifest, then every tensor as raw little-endian values at the offset the
//! manifest records (relative to the start of the data section).

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayViewD;
use serde::{Deserialize, Serialize};

use crate::data::GeneratorSpec;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::real::Real;
use crate::train::{EarlyStopping, OptimizerState, TrainConfig, TrainHistory, Trainer};

const MAGIC: &[u8; 8] = b"SETCLST\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub input_dim: usize,
    pub embedding_dim: usize,
    pub fc_units: usize,
    pub count_units: usize,
    pub assignment_logits: usize,
}

/// Training state carried by checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub spec: GeneratorSpec,
    pub step: u64,
    pub early: EarlyStopping,
    pub history: TrainHistory,
    pub has_best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub k_max: usize,
    pub layers: usize,
    pub dims: Dims,
    pub config: ModelConfig,
    pub train_config_digest: Option<String>,
    pub tensors: Vec<TensorEntry>,
    pub train: Option<TrainState>,
}

fn dims(c: &ModelConfig) -> Dims {
    Dims {
        input_dim: c.embedding.input_dim(),
        embedding_dim: c.embedding.output_dim(),
        fc_units: c.fc_units,
        count_units: c.count_units,
        assignment_logits: c.assignment_logits(),
    }
}

struct Writer<T> {
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Writer<T> {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            data: Vec::new(),
            _marker: std::marker::PhantomData,
        }
    }

    fn push(&mut self, name: String, t: &ArrayViewD<'_, T>) {
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: self.data.len(),
        });
        for &v in t.iter() {
            v.write_le(&mut self.data);
        }
    }

    fn push_params(&mut self, prefix: &str, p: &Params<T>) {
        for (name, t) in p.tensors() {
            self.push(format!("{prefix}{name}"), &t);
        }
    }
}

fn write_container(path: &Path, manifest: &Manifest, data: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(manifest)?;
    let tmp = path.with_extension("partial");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(data)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a model container"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..end])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad("manifest version mismatch"));
    }
    Ok((manifest, bytes[end..].to_vec()))
}

fn element_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::Format(format!("unknown dtype `{other}`"))),
    }
}

/// Fills `params` with the tensors stored under `prefix`, converting precision if
/// the file dtype differs from `T`.
fn fill_params<T: Real>(manifest: &Manifest, data: &[u8], prefix: &str, params: &mut Params<T>) -> Result<()> {
    let size = element_size(&manifest.dtype)?;
    for (name, mut t) in params.tensors_mut() {
        let full = format!("{prefix}{name}");
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == full)
            .ok_or_else(|| Error::Format(format!("missing tensor `{full}`")))?;
        if entry.shape != t.shape() {
            return Err(Error::Format(format!(
                "tensor `{full}` has shape {:?}, expected {:?}",
                entry.shape,
                t.shape()
            )));
        }
        let end = entry.offset + t.len() * size;
        let raw = data
            .get(entry.offset..end)
            .ok_or_else(|| Error::Format(format!("tensor `{full}` runs past the end of the file")))?;
        for (v, chunk) in t.iter_mut().zip(raw.chunks_exact(size)) {
            *v = if size == T::BYTES {
                T::read_le(chunk)
            } else if size == 4 {
                T::from_f64_lossy(f32::read_le(chunk) as f64)
            } else {
                T::from_f64_lossy(f64::read_le(chunk))
            };
        }
    }
    Ok(())
}

fn manifest_for<T: Real>(config: &ModelConfig, digest: Option<String>, tensors: Vec<TensorEntry>, train: Option<TrainState>) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        k_max: config.k_max,
        layers: config.layers,
        dims: dims(config),
        config: config.clone(),
        train_config_digest: digest,
        tensors,
        train,
    }
}

pub fn save_model<T: Real>(path: &Path, model: &Model<T>, train_config_digest: Option<String>) -> Result<()> {
    let mut w = Writer::<T>::new();
    w.push_params("", &model.params);
    let manifest = manifest_for::<T>(&model.config, train_config_digest, w.entries, None);
    write_container(path, &manifest, &w.data)
}

/// Loads the model stored in a model container or a checkpoint.
pub fn load_model<T: Real>(path: &Path) -> Result<(Model<T>, Manifest)> {
    let (manifest, data) = read_container(path)?;
    manifest.config.validate()?;
    let mut params = Params::<T>::zeros(&manifest.config);
    fill_params(&manifest, &data, "", &mut params)?;
    let model = Model::from_parts(manifest.config.clone(), params)?;
    Ok((model, manifest))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(read_container(path)?.0)
}

/// Writes everything needed to resume `trainer` bit-exactly.
pub fn save_checkpoint<T: Real>(path: &Path, trainer: &Trainer<T>) -> Result<()> {
    let mut w = Writer::<T>::new();
    w.push_params("", &trainer.model.params);
    w.push_params("opt.v.", &trainer.optimizer.v);
    w.push_params("opt.u.", &trainer.optimizer.u);
    if let Some(best) = &trainer.best {
        w.push_params("best.", best);
    }
    let state = TrainState {
        config: trainer.config.clone(),
        spec: trainer.spec.clone(),
        step: trainer.optimizer.step,
        early: trainer.early,
        history: trainer.history.clone(),
        has_best: trainer.best.is_some(),
    };
    let manifest = manifest_for::<T>(&trainer.model.config, Some(trainer.config.digest()), w.entries, Some(state));
    write_container(path, &manifest, &w.data)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Trainer<T>> {
    let (manifest, data) = read_container(path)?;
    let state = manifest
        .train
        .clone()
        .ok_or_else(|| Error::Format(format!("{} holds a model, not a training checkpoint", path.display())))?;
    let (model, _) = load_model::<T>(path)?;
    let mut optimizer = OptimizerState::new(&model.params);
    fill_params(&manifest, &data, "opt.v.", &mut optimizer.v)?;
    fill_params(&manifest, &data, "opt.u.", &mut optimizer.u)?;
    optimizer.step = state.step;
    let best = if state.has_best {
        let mut b = model.params.zeros_like();
        fill_params(&manifest, &data, "best.", &mut b)?;
        Some(b)
    } else {
        None
    };
    Trainer::restore(model, state.config, state.spec, optimizer, state.history, state.early, best)
}

//! Trained models on disk: a JSON manifest plus a little-endian weight file.
//!
//! Weight file: magic `MMW1`, u32 version, u32 tensor count, then per tensor
//! u32 name length, UTF-8 name, u32 rank, u32 extents, f32 values row-major.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FoldSpec, TrainConfig, TrainedModel, Variant};
use crate::error::{Error, Result};
use crate::evaluation::ChannelMeans;
use crate::nn::{ModelConfig, ModelParams};
use crate::preprocess::NormStats;

pub const MODEL_MAGIC: &[u8; 4] = b"MMW1";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    weights: String,
    variant: Variant,
    fold: FoldSpec,
    config: TrainConfig,
    model: ModelConfig,
    stats: NormStats,
    means: ChannelMeans,
    loss_curve: Vec<f64>,
    train_accuracy: f64,
}

/// File stem shared by a model's manifest and weights.
pub fn model_stem(fold: usize, seed: u64, variant: Variant) -> String {
    format!("model_f{fold}_s{seed}_{variant}")
}

fn encode_weights(params: &ModelParams<f32>) -> Vec<u8> {
    let state = params.state();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in state {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.bytes.len() as u64, "weight file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode_weights(bytes: &[u8], params: &mut ModelParams<f32>) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::format(0, "not a model weight file"));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::format(4, format!("unsupported weight version {version}")));
    }
    let mut state = params.state_mut();
    let count = r.u32()? as usize;
    if count != state.len() {
        return Err(Error::format(8, format!("{count} tensors stored, model has {}", state.len())));
    }
    for (name, tensor) in state.iter_mut() {
        let at = r.pos as u64;
        let len = r.u32()? as usize;
        let stored = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
        if stored != name {
            return Err(Error::format(at, format!("expected tensor {name}, found {stored}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != tensor.shape() {
            return Err(Error::format(at, format!("{name} has shape {shape:?}, model expects {:?}", tensor.shape())));
        }
        let raw = r.take(4 * tensor.len())?;
        for (v, b) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
    }
    Ok(())
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
pub fn save_model(model: &TrainedModel, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = model_stem(model.fold.index, model.config.seed, model.variant);
    let weights = dir.join(format!("{stem}.bin"));
    let manifest_path = dir.join(format!("{stem}.json"));
    fs::write(&weights, encode_weights(&model.params)).map_err(|e| Error::io(&weights, e))?;
    let manifest = Manifest {
        format_version: MODEL_VERSION,
        weights: format!("{stem}.bin"),
        variant: model.variant,
        fold: model.fold.clone(),
        config: model.config.clone(),
        model: model.params.config.clone(),
        stats: model.stats,
        means: model.means.clone(),
        loss_curve: model.loss_curve.clone(),
        train_accuracy: model.train_accuracy,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a manifest and the weight file it names (relative to the manifest).
pub fn load_model(manifest_path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::json(manifest_path, e))?;
    if m.format_version != MODEL_VERSION {
        return Err(Error::config(format!("unsupported model manifest version {}", m.format_version)));
    }
    let weights_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&m.weights);
    let weights = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    // every value is overwritten from the file
    let mut params = ModelParams::<f32>::init(m.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    decode_weights(&weights, &mut params)?;
    if params.batch_norms().iter().any(|bn| bn.running_var.data().iter().any(|v| *v < 0.0)) {
        return Err(Error::config("stored running variance is negative"));
    }
    Ok(TrainedModel {
        variant: m.variant,
        fold: m.fold,
        config: m.config,
        params,
        stats: m.stats,
        means: m.means,
        loss_curve: m.loss_curve,
        train_accuracy: m.train_accuracy,
    })
}

/// Bitwise view of every stored tensor, for equality checks in tests.
#[cfg(test)]
pub(crate) fn weight_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    encode_weights(params)
}

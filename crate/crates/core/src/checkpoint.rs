//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SAMSCKPT"
//! version  u32
//! manifest u64 length, then UTF-8 JSON
//! count    u32 number of tensors
//! tensor   u32 name length, name, u32 rank, rank × u64 dims, f64 values
//! ```
//!
//! Tensors carry the canonical parameter names. Optimizer moments, when
//! present, are stored as `adam.m.<name>` and `adam.v.<name>`. `theta_d` and
//! `likelihood.log_sigma2` hold logarithms.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EncoderStats;
use crate::error::{Error, Result};
use crate::inference::{AdamState, Model, ModelConfig, TrainConfig, TrainState};
use crate::ndcore::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SAMSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub encoder_stats: EncoderStats,
    pub library_median: Option<f64>,
    pub feature_names: Vec<String>,
    pub perturbation_names: Vec<String>,
    pub control: Option<String>,
    /// Optimizer step of the stored parameters.
    pub step: u64,
    /// Whether optimizer moments are included.
    pub has_optimizer: bool,
    pub best_step: Option<u64>,
    pub best_val_elbo: Option<f64>,
    pub train: Option<TrainConfig>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    pub manifest: Manifest,
    /// Present when optimizer moments were stored.
    pub state: Option<TrainState<S>>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

/// Writes `model` (and optionally the optimizer state) to `path`, replacing
/// any existing file atomically.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    state: Option<&TrainState<S>>,
    train: Option<&TrainConfig>,
    step: u64,
) -> Result<()> {
    let manifest = Manifest {
        config: model.config.clone(),
        seed: model.seed,
        encoder_stats: model.encoder_stats.clone(),
        library_median: model.library_median,
        feature_names: model.feature_names.clone(),
        perturbation_names: model.perturbation_names.clone(),
        control: model.control.clone(),
        step,
        has_optimizer: state.is_some(),
        best_step: state.and_then(|s| s.best.as_ref().map(|b| b.step)),
        best_val_elbo: state.and_then(|s| s.best.as_ref().map(|b| b.val_elbo)),
        train: train.cloned(),
    };
    let mut tensors: Vec<(String, &Tensor<S>)> = model
        .store
        .ids()
        .map(|id| (model.store.name(id).to_string(), model.store.get(id)))
        .collect();
    if let Some(s) = state {
        for (k, id) in model.store.ids().enumerate() {
            tensors.push((format!("adam.m.{}", model.store.name(id)), &s.adam.first[k]));
        }
        for (k, id) in model.store.ids().enumerate() {
            tensors.push((format!("adam.v.{}", model.store.name(id)), &s.adam.second[k]));
        }
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| format_err(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_bytes(r: &mut impl Read, n: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let got = r.take(n).read_to_end(&mut buf)?;
    if got as u64 != n {
        return Err(format_err("truncated file"));
    }
    Ok(buf)
}

/// Reads a checkpoint written by [`save_checkpoint`], rebuilding the model
/// from its manifest and restoring every stored tensor.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = BufReader::new(fs::File::open(path)?);
    if &read_array::<8>(&mut r)? != MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let len = read_u64(&mut r)?;
    let manifest: Manifest = serde_json::from_slice(&read_bytes(&mut r, len)?)?;
    let count = read_u32(&mut r)?;
    let mut model = Model::<S>::new(manifest.config.clone(), manifest.seed)?;
    model.encoder_stats = manifest.encoder_stats.clone();
    model.library_median = manifest.library_median;
    model.feature_names = manifest.feature_names.clone();
    model.perturbation_names = manifest.perturbation_names.clone();
    model.control = manifest.control.clone();
    let mut adam = manifest.has_optimizer.then(|| AdamState::new(&model.store));
    let mut seen = vec![false; model.store.len()];

    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        let name = String::from_utf8(read_bytes(&mut r, name_len as u64)?)
            .map_err(|_| format_err("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r)?;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = read_bytes(&mut r, 8 * n as u64)?;
        let data: Vec<S> = raw
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        let (slot, param) = match (name.strip_prefix("adam.m."), name.strip_prefix("adam.v.")) {
            (Some(p), _) => (Some(0), p),
            (_, Some(p)) => (Some(1), p),
            _ => (None, name.as_str()),
        };
        let id = model
            .store
            .id(param)
            .ok_or_else(|| format_err(format!("unknown tensor {name:?}")))?;
        match (slot, adam.as_mut()) {
            (None, _) => {
                model.store.set(id, tensor)?;
                seen[model.store.ids().position(|i| i == id).expect("id")] = true;
            }
            (Some(k), Some(state)) => {
                let pos = model.store.ids().position(|i| i == id).expect("id");
                let target = if k == 0 { &mut state.first[pos] } else { &mut state.second[pos] };
                if target.shape() != tensor.shape() {
                    return Err(format_err(format!("moment {name:?} has the wrong shape")));
                }
                *target = tensor;
            }
            (Some(_), None) => return Err(format_err(format!("unexpected optimizer tensor {name:?}"))),
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        let id = model.store.ids().nth(missing).expect("id");
        return Err(format_err(format!("missing tensor {:?}", model.store.name(id))));
    }
    let state = adam.map(|mut a| {
        a.steps = manifest.step;
        TrainState {
            step: manifest.step,
            adam: a,
            best: None,
        }
    });
    Ok(Checkpoint { model, manifest, state })
}

//! Checkpoint directory: a JSON header with a tensor manifest, plus one raw
//! little-endian `f32` blob holding parameters followed by Adam moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Tensor};
use crate::volume::{read_json, write_json};

use super::{build_model, ModelConfig, ModelState};

pub const CHECKPOINT_HEADER: &str = "checkpoint.json";
pub const CHECKPOINT_WEIGHTS: &str = "weights.f32";
const FORMAT: &str = "uadseg-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in elements.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    model: ModelConfig,
    epoch: usize,
    best_val_loss: Option<f64>,
    adam: AdamConfig,
    adam_step: u64,
    tensors: Vec<ManifestEntry>,
}

fn replace(tmp: &Path, dst: &Path) -> Result<()> {
    fs::rename(tmp, dst).map_err(|e| Error::io(dst, e))
}

/// Write `state` into `dir`; each file is written to a temporary name first
/// and renamed into place.
pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::with_capacity(3 * 4 * state.params.numel());
    let mut tensors = Vec::new();
    let mut offset = 0;
    let groups = [
        ("", state.params.tensors()),
        ("adam.m/", &state.adam.m[..]),
        ("adam.v/", &state.adam.v[..]),
    ];
    for (prefix, group) in groups {
        for ((name, _), t) in state.params.iter().zip(group) {
            tensors.push(ManifestEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            blob.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    let header = Header {
        format: FORMAT.into(),
        model: state.config.clone(),
        epoch: state.epoch,
        best_val_loss: state.best_val_loss,
        adam: state.adam.config,
        adam_step: state.adam.step,
        tensors,
    };
    let weights = dir.join(CHECKPOINT_WEIGHTS);
    let weights_tmp = dir.join(format!("{CHECKPOINT_WEIGHTS}.tmp"));
    fs::write(&weights_tmp, blob).map_err(|e| Error::io(&weights_tmp, e))?;
    let head = dir.join(CHECKPOINT_HEADER);
    let head_tmp = dir.join(format!("{CHECKPOINT_HEADER}.tmp"));
    write_json(&head_tmp, &header)?;
    replace(&weights_tmp, &weights)?;
    replace(&head_tmp, &head)
}

/// Restore a state written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<ModelState> {
    let header: Header = read_json(&dir.join(CHECKPOINT_HEADER))?;
    if header.format != FORMAT {
        return Err(Error::InvalidHeader(format!(
            "unknown checkpoint format `{}`",
            header.format
        )));
    }
    let path = dir.join(CHECKPOINT_WEIGHTS);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut state = build_model(&header.model, 0)?;
    let n = state.params.len();
    if header.tensors.len() != 3 * n {
        return Err(Error::InvalidHeader(format!(
            "manifest lists {} tensors, model needs {}",
            header.tensors.len(),
            3 * n
        )));
    }
    let expected = 3 * state.params.numel() * 4;
    if bytes.len() != expected {
        return Err(Error::ByteCount {
            path,
            expected,
            found: bytes.len(),
        });
    }
    let names: Vec<String> = state.params.iter().map(|(name, _)| name.to_string()).collect();
    let mut decoded = Vec::with_capacity(3 * n);
    for (i, entry) in header.tensors.iter().enumerate() {
        let prefix = ["", "adam.m/", "adam.v/"][i / n];
        let want = format!("{prefix}{}", names[i % n]);
        let shape = state.params.tensors()[i % n].shape();
        if entry.name != want || entry.shape != shape {
            return Err(Error::InvalidHeader(format!(
                "manifest entry {i} is `{}` {:?}, expected `{want}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let range = entry.offset * 4..(entry.offset + numel) * 4;
        let raw = bytes
            .get(range)
            .ok_or_else(|| Error::InvalidHeader(format!("tensor `{}` lies outside the weight blob", entry.name)))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        decoded.push(Tensor::new(&entry.shape, data)?);
    }
    let mut rest = decoded.split_off(n);
    let v = rest.split_off(n);
    for (dst, src) in state.params.tensors_mut().iter_mut().zip(decoded) {
        *dst = src;
    }
    state.adam.m = rest;
    state.adam.v = v;
    state.adam.config = header.adam;
    state.adam.step = header.adam_step;
    state.epoch = header.epoch;
    state.best_val_loss = header.best_val_loss;
    Ok(state)
}

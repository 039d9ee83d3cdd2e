//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic `RVLACKPT`, little-endian `u32` format version,
//! little-endian `u64` header length, a UTF-8 JSON header, then every tensor's
//! values as little-endian `f64` in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::decoder::{ActionQueryBank, InitMeta};
use super::Model;
use crate::data::COORD_DIMS;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RVLACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    init_meta: InitMeta,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Writes `model` plus caller metadata; identical inputs give identical bytes.
pub fn save_checkpoint(path: &Path, model: &Model, meta: &serde_json::Value) -> Result<()> {
    let store = model.params();
    let mut offset = 0;
    let tensors = store
        .ids()
        .map(|id| {
            let t = store.get(id);
            let e = Entry {
                name: store.name(id).to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = Header {
        model_config: model.config().clone(),
        init_meta: model.init_meta().clone(),
        meta: meta.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + header.len() + offset * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in store.flatten() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let blob = &bytes[20 + hlen..];
    if blob.len() % 8 != 0 {
        return Err(bad("blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let cfg = header.model_config;
    let bank = ActionQueryBank {
        queries: Tensor::zeros(&[cfg.query_rows(), cfg.d_model]),
        horizon: cfg.horizon,
        coord_dims: COORD_DIMS,
        d_model: cfg.d_model,
        init_meta: header.init_meta,
    };
    let mut model = Model::with_bank(cfg, bank, 0)?;
    if header.tensors.len() != model.params().len() {
        return Err(bad(&format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            model.params().len()
        )));
    }
    for e in header.tensors {
        let id = model
            .params()
            .id_of(&e.name)
            .ok_or_else(|| bad(&format!("unknown tensor {}", e.name)))?;
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(&format!("tensor {} overruns the blob", e.name)))?;
        let t = Tensor::new(e.shape, data.to_vec())?;
        model.params_mut().set(id, t)?;
    }
    Ok((model, header.meta))
}

//! Single-file checkpoints: magic bytes, a little-endian `u64` header length,
//! a JSON header (model config plus tensor index) and raw `f64` LE data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RGLCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    /// Free-form metadata (training step, metrics, ...).
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::with_capacity(model.params.num_scalars() * 8);
    let mut offset = 0;
    for (_, name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset,
        });
        offset += t.numel();
        for v in &t.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.cfg.clone(),
        meta,
        tensors,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&data);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, rebuilding the model from its stored config.
///
/// Every parameter of the rebuilt model must be present with the same shape.
pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let data = &bytes[16 + hlen..];
    let mut model = Model::new(header.config)?;
    if header.tensors.len() != model.params.len() {
        return Err(bad(&format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    for entry in &header.tensors {
        let id = model
            .params
            .id(&entry.name)
            .ok_or_else(|| bad(&format!("unknown tensor {}", entry.name)))?;
        let t = model.params.get_mut(id);
        if t.shape != entry.shape {
            return Err(bad(&format!(
                "tensor {} has shape {:?}, expected {:?}",
                entry.name, entry.shape, t.shape
            )));
        }
        let raw = data
            .get(entry.offset * 8..(entry.offset + t.numel()) * 8)
            .ok_or_else(|| bad("truncated data"))?;
        for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok((model, header.meta))
}

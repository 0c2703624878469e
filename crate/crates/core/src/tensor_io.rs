//! Self-describing tensor container.
//!
//! Layout: the 8-byte magic `GDSTNSR1`, a little-endian `u64` header length,
//! a UTF-8 JSON header `{"meta": .., "tensors": [{"name", "shape"}, ..]}`,
//! then every tensor's values as row-major little-endian `f64`, in header order.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{GdsError, Result};
use crate::tinylm::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"GDSTNSR1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_array(name: &str, view: ArrayViewD<'_, f64>) -> Self {
        Self {
            name: name.to_string(),
            shape: view.shape().to_vec(),
            data: view.iter().copied().collect(),
        }
    }

    pub fn into_array(self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data).expect("shape checked on read")
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Write to a sibling temp file, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| GdsError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| GdsError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| GdsError::io(&tmp, e))?;
        f.sync_all().map_err(|e| GdsError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| GdsError::io(path, e))
}

pub fn encode_container(meta: &serde_json::Value, tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let n_values: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_container(path: &Path, meta: &serde_json::Value, tensors: &[NamedTensor]) -> Result<()> {
    write_atomic(path, &encode_container(meta, tensors)?)
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<NamedTensor>)> {
    let bytes = std::fs::read(path).map_err(|e| GdsError::io(path, e))?;
    let bad = |message: &str| GdsError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| bad(&format!("header is not valid JSON: {e}")))?;
    let mut offset = body_start;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset
            .checked_add(n * 8)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(&format!("tensor {} truncated", entry.name)))?;
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset = end;
        tensors.push(NamedTensor {
            name: entry.name,
            shape: entry.shape,
            data,
        });
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok((header.meta, tensors))
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let meta = serde_json::json!({ "kind": "tinylm_checkpoint", "config": params.config });
    let tensors: Vec<NamedTensor> = params
        .named()
        .into_iter()
        .map(|(name, v)| NamedTensor::from_array(&name, v))
        .collect();
    encode_container(&meta, &tensors)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params)?)
}

/// Load a checkpoint; every tensor must be present with the shape its
/// config implies.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let (meta, tensors) = read_container(path)?;
    let bad = |message: String| GdsError::Format {
        path: path.to_path_buf(),
        message,
    };
    if meta.get("kind").and_then(|k| k.as_str()) != Some("tinylm_checkpoint") {
        return Err(bad("not a model checkpoint".into()));
    }
    let config: ModelConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| bad(format!("bad model config: {e}")))?;
    config.validate().map_err(|e| bad(e.to_string()))?;
    let mut params = ModelParams::zeros(&config);
    let expected = params.named().len();
    if tensors.len() != expected {
        return Err(bad(format!("expected {expected} tensors, found {}", tensors.len())));
    }
    let mut by_name: std::collections::HashMap<String, NamedTensor> =
        tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    for (name, mut slot) in params.named_mut() {
        let t = by_name.remove(&name).ok_or_else(|| GdsError::UnknownPath(name.clone()))?;
        if t.shape != slot.shape() {
            return Err(GdsError::ShapeMismatch {
                path: name,
                expected: slot.shape().to_vec(),
                found: t.shape,
            });
        }
        slot.iter_mut().zip(t.data).for_each(|(s, v)| *s = v);
    }
    Ok(params)
}

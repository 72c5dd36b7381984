//! Weight files: a flat little-endian f64 blob plus a JSON sidecar listing
//! each tensor's name, shape and element offset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements, not bytes.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub tensors: Vec<TensorEntry>,
    pub step: usize,
    pub config_hash: String,
}

/// Serializes tensors in name order.
pub fn encode(params: &ModelParams, step: usize, config_hash: &str) -> (Vec<u8>, Sidecar) {
    let mut bytes = Vec::with_capacity(params.n_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.tensors.len());
    let mut offset = 0;
    for (name, t) in &params.tensors {
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    (bytes, Sidecar { tensors, step, config_hash: config_hash.to_string() })
}

pub fn decode(bytes: &[u8], sidecar: &Sidecar, path: &Path) -> Result<ModelParams> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    if bytes.len() % 8 != 0 {
        return Err(bad(format!("{} bytes is not a whole number of f64 values", bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut tensors = BTreeMap::new();
    let mut used = 0;
    for e in &sidecar.tensors {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(format!("tensor {} runs past the end of the weight file", e.name)))?;
        let t = Tensor::new(e.shape.clone(), data.to_vec()).map_err(|err| bad(err.to_string()))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor {}", e.name)));
        }
        used += n;
    }
    if used != values.len() {
        return Err(bad(format!("sidecar covers {used} of {} values", values.len())));
    }
    Ok(ModelParams { tensors })
}

pub fn save(params: &ModelParams, step: usize, config_hash: &str, bin: &Path, json: &Path) -> Result<()> {
    let (bytes, sidecar) = encode(params, step, config_hash);
    std::fs::write(bin, bytes).map_err(|e| Error::io(bin, e))?;
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(json, text + "\n").map_err(|e| Error::io(json, e))
}

pub fn load(bin: &Path, json: &Path) -> Result<(ModelParams, Sidecar)> {
    let text = std::fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(json, e))?;
    let bytes = std::fs::read(bin).map_err(|e| Error::io(bin, e))?;
    Ok((decode(&bytes, &sidecar, bin)?, sidecar))
}

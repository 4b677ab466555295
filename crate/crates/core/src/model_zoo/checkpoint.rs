//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `PADCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use autograd::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PADCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    keypoints: usize,
    heatmap_size: (usize, usize),
    experiment: Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `model` and the experiment configuration that produced it.
pub fn save_checkpoint(path: &Path, model: &Model, experiment: &Value) -> Result<()> {
    let header = Header {
        model: model.config.clone(),
        keypoints: model.keypoints,
        heatmap_size: model.heatmap_size,
        experiment: experiment.clone(),
        tensors: model.params.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let floats: usize = model.params.values().map(Tensor::len).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * floats);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in model.params.values() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write then rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint back as the model and its experiment configuration.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut offset = 16 + len;
    let mut params = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(entry.name, Tensor::from_vec(entry.shape, data));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let model = Model::from_parts(header.model, header.keypoints, header.heatmap_size, params)?;
    Ok((model, header.experiment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::{build_model, VariantTag};

    #[test]
    fn round_trip_preserves_parameters_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig { variant: VariantTag::Aidf, ..ModelConfig::default() };
        let model = build_model(&cfg, 8, (16, 16), 11).unwrap();
        let exp = serde_json::json!({"seed": 11});
        save_checkpoint(&path, &model, &exp).unwrap();
        let (back, exp_back) = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(exp_back, exp);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}

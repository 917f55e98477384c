//! `EMOW` weight container.
//!
//! Layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `EMOW` |
//! | 4     | u32 version (1) |
//! | 4     | u32 manifest length `n` |
//! | n     | UTF-8 JSON manifest: `{"config": ModelConfig, "tensors": [{"name", "shape", "offset"}]}` |
//! | ...   | f32 payload; `offset` is in bytes from the payload start |

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Audio2RigModel, ModelConfig, ModelError};
use crate::nn::Parameters;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"EMOW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Serialises the model. Values are stored as `f32`.
pub fn encode_weights(model: &Audio2RigModel) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    model.visit("", &mut |name, shape, data| {
        tensors.push(TensorEntry { name: name.to_string(), shape: shape.to_vec(), offset: payload.len() });
        for &v in data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let manifest = serde_json::to_vec(&Manifest { config: model.config.clone(), tensors }).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<Audio2RigModel, ModelError> {
    let bad = |m: String| ModelError::Weights(m);
    if bytes.len() < 12 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + manifest_len;
    if bytes.len() < payload_start {
        return Err(bad("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..payload_start])?;
    let payload = &bytes[payload_start..];

    let mut model = Audio2RigModel::new(manifest.config, 0)?;
    let index: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut failure = None;
    let mut shapes = HashMap::new();
    model.visit("", &mut |name, shape, _| {
        shapes.insert(name.to_string(), shape.to_vec());
    });
    model.visit_mut("", &mut |name, data| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = index.get(name) else {
            failure = Some(format!("missing tensor {name}"));
            return;
        };
        if entry.shape != shapes[name] {
            failure = Some(format!("tensor {name} has shape {:?}, expected {:?}", entry.shape, shapes[name]));
            return;
        }
        let end = entry.offset + data.len() * 4;
        let Some(raw) = payload.get(entry.offset..end) else {
            failure = Some(format!("tensor {name} runs past the payload"));
            return;
        };
        for (v, c) in data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
    });
    if let Some(msg) = failure {
        return Err(bad(msg));
    }
    if crate::nn::flatten(&model).iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter".into()));
    }
    Ok(model)
}

pub fn write_weights(model: &Audio2RigModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    std::fs::write(path, encode_weights(model))?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<Audio2RigModel, ModelError> {
    decode_weights(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let model = Audio2RigModel::new(ModelConfig::desk(6, 8, 2, 2), 9).unwrap();
        let bytes = encode_weights(&model);
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in crate::nn::flatten(&model).iter().zip(crate::nn::flatten(&back)) {
            assert_eq!(*a as f32 as f64, b);
        }
        assert_eq!(encode_weights(&back), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = Audio2RigModel::new(ModelConfig::desk(6, 8, 2, 1), 9).unwrap();
        let bytes = encode_weights(&model);
        assert!(decode_weights(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(decode_weights(&bad).is_err());
        assert!(decode_weights(&bytes[..10]).is_err());
    }
}

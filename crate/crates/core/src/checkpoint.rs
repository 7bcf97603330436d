//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `AMDCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! raw little-endian parameter payload. Every manifest entry addresses its
//! own byte range and the ranges tile the payload with no gaps.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{SplitSpec, Standardizer};
use crate::error::{AmdError, Result};
use crate::model::AmdModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AMDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

/// How the training series was prepared, so new data can be treated alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataInfo {
    pub channel_names: Vec<String>,
    pub standardizer: Standardizer,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub best_val_mse: Option<f64>,
    pub rng: Option<ChaCha8Rng>,
    pub data: Option<DataInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    metadata: TrainingMeta,
    payload_len: u64,
}

/// Serializes the model and metadata to bytes.
pub fn to_bytes<F: Scalar>(model: &AmdModel<F>, meta: &TrainingMeta) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(model.params.num_values() * F::BYTES);
    let mut manifest = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        let offset = payload.len() as u64;
        t.data().iter().for_each(|v| v.write_le(&mut payload));
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: F::DTYPE.to_string(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        manifest,
        metadata: meta.clone(),
        payload_len: payload.len() as u64,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> AmdError {
    AmdError::Checkpoint(msg.into())
}

/// Parses a checkpoint, rebuilding the model structure from its config and
/// filling every parameter from the payload. Nothing is returned unless the
/// whole file is consistent.
pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<(AmdModel<F>, TrainingMeta)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if header_len > body.len() {
        return Err(bad(format!("header of {header_len} bytes is truncated")));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| bad(format!("malformed header: {e}")))?;
    if header.format_version != version {
        return Err(bad("header and preamble disagree on the format version"));
    }
    let payload = &body[header_len..];
    if payload.len() as u64 != header.payload_len {
        return Err(bad(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            header.payload_len
        )));
    }

    let mut sorted: Vec<&ManifestEntry> = header.manifest.iter().collect();
    sorted.sort_by_key(|e| e.offset);
    let mut cursor = 0u64;
    for e in &sorted {
        if e.offset != cursor {
            return Err(bad(format!(
                "entry `{}` starts at {} but the previous entry ends at {cursor}",
                e.name, e.offset
            )));
        }
        if e.dtype != F::DTYPE {
            return Err(bad(format!(
                "entry `{}` is {}, loading as {}",
                e.name,
                e.dtype,
                F::DTYPE
            )));
        }
        let expect = e.shape.iter().product::<usize>() as u64 * F::BYTES as u64;
        if e.nbytes != expect {
            return Err(bad(format!(
                "entry `{}` has {} bytes, shape {:?} needs {expect}",
                e.name, e.nbytes, e.shape
            )));
        }
        cursor += e.nbytes;
    }
    if cursor != header.payload_len {
        return Err(bad(format!(
            "manifest covers {cursor} bytes of a {}-byte payload",
            header.payload_len
        )));
    }

    let mut model = AmdModel::<F>::new(header.config, 0)?;
    if model.params.len() != header.manifest.len() {
        return Err(bad(format!(
            "manifest lists {} parameters, config builds {}",
            header.manifest.len(),
            model.params.len()
        )));
    }
    for e in &header.manifest {
        let id = model
            .params
            .id(&e.name)
            .ok_or_else(|| bad(format!("unknown parameter `{}`", e.name)))?;
        let slot = model.params.get_mut(id);
        if slot.shape() != e.shape.as_slice() {
            return Err(bad(format!(
                "parameter `{}` has shape {:?}, config expects {:?}",
                e.name,
                e.shape,
                slot.shape()
            )));
        }
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let values = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        *slot = Tensor::new(e.shape.clone(), values)?;
    }
    Ok((model, header.metadata))
}

pub fn save_checkpoint<F: Scalar>(model: &AmdModel<F>, meta: &TrainingMeta, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    fs::write(path, bytes).map_err(|e| AmdError::io(path, e))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(AmdModel<F>, TrainingMeta)> {
    let bytes = fs::read(path).map_err(|e| AmdError::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy_config;

    #[test]
    fn round_trip_is_bitwise() {
        let model = AmdModel::<f64>::new(toy_config(), 11).unwrap();
        let bytes = to_bytes(&model, &TrainingMeta::default()).unwrap();
        let (back, _) = from_bytes::<f64>(&bytes).unwrap();
        assert!(back.params.bitwise_eq(&model.params));
        assert_eq!(back.config, model.config);
    }

    #[test]
    fn rejects_truncation_and_wrong_magic() {
        let model = AmdModel::<f64>::new(toy_config(), 11).unwrap();
        let bytes = to_bytes(&model, &TrainingMeta::default()).unwrap();
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes::<f64>(&wrong).is_err());
        assert!(from_bytes::<f32>(&bytes).is_err());
    }
}

//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
//! the little-endian f32 payload of every tensor in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

const MAGIC: &[u8; 8] = b"HSNCKPT\0";
const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub seed: u64,
    /// Class names in output order.
    pub classes: Vec<String>,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    metadata: CheckpointMetadata,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub spec: ModelSpec,
    pub metadata: CheckpointMetadata,
    pub manifest: Vec<TensorEntry>,
    pub payload: Vec<f32>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, metadata: CheckpointMetadata) -> Self {
        let mut manifest = Vec::new();
        let mut payload = Vec::new();
        for (name, p) in model.params() {
            manifest.push(TensorEntry {
                name,
                shape: p.value.shape().to_vec(),
                offset: payload.len(),
                len: p.len(),
                trainable: p.trainable,
            });
            payload.extend(p.value.iter().copied());
        }
        Self {
            spec: model.spec().clone(),
            metadata,
            manifest,
            payload,
        }
    }

    /// Rebuild the model and copy every tensor in by name.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.spec, 0)?;
        let by_name: BTreeMap<&str, &TensorEntry> = self.manifest.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut params = model.params_mut();
        if params.len() != self.manifest.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.manifest.len(),
                params.len()
            )));
        }
        for (name, p) in params.iter_mut() {
            let entry = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if entry.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: stored shape {:?}, model shape {:?}",
                    entry.shape,
                    p.value.shape()
                )));
            }
            let end = entry.offset + entry.len;
            let data = self
                .payload
                .get(entry.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the payload")))?;
            p.value = ArrayD::from_shape_vec(IxDyn(&entry.shape), data.to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            p.trainable = entry.trainable;
        }
        drop(params);
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            spec: self.spec.clone(),
            metadata: self.metadata.clone(),
            tensors: self.manifest.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[PREAMBLE..];
        if body.len() < header_len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        let raw = &body[header_len..];
        if !raw.len().is_multiple_of(4) {
            return Err(Error::Checkpoint("payload is not a whole number of f32 values".into()));
        }
        let payload: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected: usize = header.tensors.iter().map(|t| t.len).sum();
        if expected != payload.len() {
            return Err(Error::Checkpoint(format!(
                "manifest describes {expected} values, payload holds {}",
                payload.len()
            )));
        }
        Ok(Self {
            spec: header.spec,
            metadata: header.metadata,
            manifest: header.tensors,
            payload,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn size_bytes(&self) -> usize {
        self.to_bytes().len()
    }

    pub fn payload_bytes(&self) -> usize {
        4 * self.payload.len()
    }
}

/// Byte length of the model's checkpoint with default metadata.
pub fn serialized_size_bytes(model: &Model) -> usize {
    ModelCheckpoint::from_model(model, CheckpointMetadata::default()).size_bytes()
}

//! Checkpoint files: magic, header length, JSON header, raw little-endian payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FGINETC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: serde_json::Value,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, config: serde_json::Value, step: u64) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let items = store
            .params()
            .iter()
            .map(|p| (&p.name, EntryKind::Param, &p.value))
            .chain(store.buffers().iter().map(|b| (&b.name, EntryKind::Buffer, &b.value)));
        for (name, kind, value) in items {
            entries.push(TensorEntry {
                name: name.clone(),
                kind,
                shape: value.shape().to_vec(),
                dtype: "f64".into(),
                offset,
            });
            offset += 8 * value.len() as u64;
            tensors.push(value.clone());
        }
        Checkpoint {
            header: Header {
                config,
                step,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let header = serde_json::to_vec(&self.header).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|t| 8 * t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[body..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(bad(format!("{}: offset {} but expected {expected}", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset as usize + 8 * n;
            if end > payload.len() {
                return Err(bad(format!("{}: payload truncated", e.name)));
            }
            let data = payload[e.offset as usize..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(&e.shape, data).map_err(|err| bad(err.to_string()))?);
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - expected as usize)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every stored tensor into the matching parameter or buffer.
    /// Names and shapes must match exactly.
    pub fn restore(&self, store: &mut ParamStore) -> Result<(), TrainError> {
        let n_params = store.params().len();
        let n_buffers = store.buffers().len();
        let want = n_params + n_buffers;
        if self.tensors.len() != want {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {want}",
                self.tensors.len()
            )));
        }
        for (e, t) in self.header.tensors.iter().zip(&self.tensors) {
            let slot = match e.kind {
                EntryKind::Param => store.params_mut().iter_mut().find(|p| p.name == e.name).map(|p| &mut p.value),
                EntryKind::Buffer => store.buffers_mut().iter_mut().find(|b| b.name == e.name).map(|b| &mut b.value),
            };
            let slot = slot.ok_or_else(|| TrainError::Checkpoint(format!("unknown tensor {}", e.name)))?;
            if slot.shape() != t.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "{}: shape {:?} in checkpoint, {:?} in model",
                    e.name,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

//! Single-file checkpoint container.
//!
//! Layout: the magic bytes `GSAW`, a `u32` little-endian format version, a
//! `u64` little-endian header length, a JSON header listing tensor names and
//! shapes plus free-form metadata, then every tensor's values as little-endian
//! `f32` in header order. Values are stored in `f32` regardless of the tensor
//! element type in memory; the `f32` training path round-trips bit-exactly.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SitModel;
use crate::tensor::{el, Element, Tensor};

const MAGIC: &[u8; 4] = b"GSAW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory checkpoint: named tensors in insertion order plus metadata.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, tensors: Vec::new() }
    }

    pub fn push<E: Element>(&mut self, name: impl Into<String>, t: &Tensor<E>) {
        let data = t.data().iter().map(|v| v.to_f64().unwrap() as f32).collect();
        self.tensors.push(TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|e| e.name == name)
    }

    /// Replaces `slot` with a parameter tensor holding the stored values.
    pub fn restore<E: Element>(&self, name: &str, slot: &mut Tensor<E>) -> Result<()> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` not in checkpoint")))?;
        if entry.shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                entry.shape,
                slot.shape()
            )));
        }
        let data = entry.data.iter().map(|&v| el::<E>(v as f64)).collect();
        *slot = Tensor::param(&entry.shape, data);
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = Header {
            tensors: self
                .tensors
                .iter()
                .map(|e| HeaderEntry { name: e.name.clone(), shape: e.shape.clone() })
                .collect(),
            meta: self.meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|e| e.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header_bytes.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for e in &self.tensors {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        // write-then-rename so a crash never leaves a torn checkpoint behind
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_at = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_at])?;
        let expected: usize = header
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 4)
            .sum();
        let payload = &bytes[payload_at..];
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes but the header promises {expected}",
                payload.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut at = 0;
        for e in header.tensors {
            let n = e.shape.iter().product::<usize>();
            let data = payload[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += 4 * n;
            tensors.push(TensorEntry { name: e.name, shape: e.shape, data });
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }
}

/// Captures every model parameter under its visitation name.
pub fn snapshot_model<E: Element>(
    model: &mut SitModel<E>,
    meta: serde_json::Value,
) -> Checkpoint {
    let mut ck = Checkpoint::new(meta);
    model.visit_params(&mut |name, t| ck.push(name, &*t));
    ck
}

/// Loads every model parameter from the checkpoint. Extra tensors (optimizer
/// state and the like) are ignored; a missing or misshapen parameter is an
/// error, reported after the walk so one message lists the first problem.
pub fn restore_model<E: Element>(ck: &Checkpoint, model: &mut SitModel<E>) -> Result<()> {
    let mut problem: Option<Error> = None;
    let mut seen = HashSet::new();
    model.visit_params(&mut |name, t| {
        seen.insert(name.clone());
        if problem.is_none() {
            if let Err(e) = ck.restore(&name, t) {
                problem = Some(e);
            }
        }
    });
    match problem {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

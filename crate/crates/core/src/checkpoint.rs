//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian manifest length `n`, `n` bytes of UTF-8 JSON
//! manifest, then every tensor's values as little-endian IEEE-754 doubles. The
//! manifest records the format version, the model configuration, head kind,
//! query names, optional training configuration, and for each tensor its name,
//! shape and byte offset into the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::QuerySet;
use crate::encoder::{HeadKind, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub head: HeadKind,
    pub queries: Vec<String>,
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn new(model: Model, train: Option<TrainConfig>) -> Self {
        Checkpoint { model, train }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut records = Vec::new();
        for t in self.model.params.tensors() {
            records.push(TensorRecord {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += 8 * t.data.len();
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            head: self.model.head_kind(),
            queries: self.model.queries.names().to_vec(),
            train: self.train.clone(),
            tensors: records,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.params.tensors() {
            for x in t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let head: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("file shorter than its length prefix".into()))?;
        let len = usize::try_from(u64::from_le_bytes(head)).map_err(|_| bad("manifest length overflows".into()))?;
        let json = bytes
            .get(8..8usize.saturating_add(len))
            .ok_or_else(|| bad(format!("manifest of {len} bytes is truncated")))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        manifest.model.validate()?;
        let queries = QuerySet::new(manifest.queries.iter().cloned())?;
        let data = &bytes[8 + len..];

        let mut params = Parameters::zeros(&manifest.model, manifest.head, &queries);
        let slots = params.tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(bad(format!(
                "{} tensors stored, configuration needs {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        let mut expected_end = 0;
        for ((name, shape, dst), rec) in slots.into_iter().zip(&manifest.tensors) {
            if rec.name != name || rec.shape != shape {
                return Err(bad(format!(
                    "tensor {:?} {:?} where {name:?} {shape:?} was expected",
                    rec.name, rec.shape
                )));
            }
            let end = rec.offset + 8 * dst.len();
            let src = data
                .get(rec.offset..end)
                .ok_or_else(|| bad(format!("tensor {name:?} is truncated")))?;
            for (x, chunk) in dst.iter_mut().zip(src.chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            expected_end = expected_end.max(end);
        }
        if data.len() != expected_end {
            return Err(bad(format!(
                "{} trailing bytes after the last tensor",
                data.len() - expected_end
            )));
        }
        Ok(Checkpoint {
            model: Model {
                config: manifest.model,
                queries,
                params,
            },
            train: manifest.train,
        })
    }
}

pub fn save_checkpoint(model: &Model, train: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = Checkpoint::new(model.clone(), train.cloned()).to_bytes();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

//! Checkpoint files: `MMCK`, version, manifest length, JSON manifest, tensor blob.
//!
//! ```text
//! "MMCK" | u32 LE version (=1) | u32 LE manifest length | manifest (UTF-8 JSON) | blob
//! ```
//!
//! The manifest holds the config, the vocabularies, and a tensor table
//! `name → {shape, offset, length}` with byte offsets into the blob. Tensor
//! data is binary32 little-endian, stored in table (name) order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{EmbedConfig, Model, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: EmbedConfig,
    pub vocabularies: Vec<Vocabulary>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let named: BTreeMap<String, &Tensor<f32>> = model.params.named().into_iter().collect();
    let mut tensors = BTreeMap::new();
    let mut blob = Vec::new();
    for (name, t) in &named {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() - offset,
            },
        );
    }
    let manifest = Manifest {
        config: model.config.clone(),
        vocabularies: model.vocabs.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let err = |m: String| Error::Checkpoint(m);
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unknown version {version}")));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let manifest_end = 12usize
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| err("manifest runs past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[12..manifest_end])
        .map_err(|e| err(format!("manifest: {e}")))?;
    let blob = &bytes[manifest_end..];

    manifest.config.validate()?;
    let vocab_sizes: Vec<usize> = manifest.vocabularies.iter().map(Vocabulary::len).collect();
    let mut params = ModelParams::zeros(&manifest.config, &vocab_sizes);
    let expected: usize = manifest.tensors.values().map(|e| e.length).sum();
    if expected != blob.len() {
        return Err(err(format!(
            "blob has {} bytes, manifest lists {expected}",
            blob.len()
        )));
    }
    if manifest.tensors.len() != params.named().len() {
        return Err(err(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            params.named().len()
        )));
    }
    for (name, slot) in params.named_mut() {
        let entry = manifest
            .tensors
            .get(&name)
            .ok_or_else(|| err(format!("tensor {name} missing from manifest")))?;
        if entry.shape != slot.shape() {
            return Err(err(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                entry.shape,
                slot.shape()
            )));
        }
        if entry.length != slot.len() * 4 {
            return Err(err(format!(
                "tensor {name} length {} does not match its shape",
                entry.length
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.length)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| err(format!("tensor {name} lies outside the blob")))?;
        let values: Vec<f32> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err(format!("tensor {name} holds non-finite values")));
        }
        slot.data_mut().copy_from_slice(&values);
    }
    Ok(Model {
        config: manifest.config,
        params,
        vocabs: manifest.vocabularies,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

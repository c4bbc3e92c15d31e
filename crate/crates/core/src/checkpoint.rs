//! Single-file model checkpoints.
//!
//! Layout: an 8-byte little-endian manifest length, a UTF-8 JSON manifest
//! (`format_version`, `config`, ordered parameter records with name, shape
//! and byte offset into the blob), then the parameters as little-endian
//! `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::segmodel::{SegModel, SegModelConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SegModelConfig,
    pub params: Vec<ParamRecord>,
}

pub fn save_checkpoint(model: &SegModel) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut records = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        records.push(ParamRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 4;
    }
    let manifest = serde_json::to_vec(&Manifest {
        format_version: FORMAT_VERSION,
        config: model.config,
        params: records,
    })?;
    let mut out = Vec::with_capacity(8 + manifest.len() + offset);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in model.params.tensors() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads only the manifest of a checkpoint.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let corrupt = |msg: String| Error::CorruptCheckpoint(msg);
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| corrupt("missing manifest length".into()))?
        .try_into()
        .expect("eight bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let body = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| corrupt(format!("manifest of {len} bytes truncated")))?;
    let manifest: Manifest =
        serde_json::from_slice(body).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, &bytes[8 + len..]))
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<SegModel> {
    let corrupt = |msg: String| Error::CorruptCheckpoint(msg);
    let (manifest, blob) = read_manifest(bytes)?;
    let mut expected_offset = 0;
    let mut params = ParamSet::new();
    for rec in &manifest.params {
        let numel: usize = rec.shape.iter().product();
        if rec.offset != expected_offset {
            return Err(corrupt(format!("parameter `{}` has offset {} (expected {expected_offset})", rec.name, rec.offset)));
        }
        let end = rec.offset + numel * 4;
        let raw = blob
            .get(rec.offset..end)
            .ok_or_else(|| corrupt(format!("blob too short for parameter `{}`", rec.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
            .collect();
        params.push(rec.name.clone(), Tensor::new(rec.shape.clone(), data).map_err(|e| corrupt(e.to_string()))?);
        expected_offset = end;
    }
    if blob.len() != expected_offset {
        return Err(corrupt(format!(
            "blob holds {} bytes, manifest describes {expected_offset}",
            blob.len()
        )));
    }
    SegModel::from_params(manifest.config, params).map_err(|e| corrupt(e.to_string()))
}

pub fn write_checkpoint(path: &Path, model: &SegModel) -> Result<()> {
    let bytes = save_checkpoint(model)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<SegModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}

/// Rounds every parameter through `f32`, i.e. what a save/load round trip
/// yields.
pub fn quantize(model: &SegModel) -> SegModel {
    let mut out = model.clone();
    for (_, t) in out.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    out
}

//! Checkpoint files.
//!
//! Layout: the 8 magic bytes `TGACKPT\0`, a little-endian `u32` header length,
//! a JSON header (format version, precision, seed, tensor manifest and an
//! opaque config object), then each tensor's values as little-endian floats in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::ParamStore;
use super::scalar::{Precision, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TGACKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub precision: Precision,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn encode<F: Scalar>(params: &ParamStore<F>, config: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        precision: F::PRECISION,
        seed: params.seed(),
        tensors: params
            .manifest()
            .into_iter()
            .map(|(name, r, c)| TensorEntry { name, shape: [r, c] })
            .collect(),
        config,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + params.num_scalars() * F::PRECISION.byte_width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for id in params.ids() {
        for &x in params.value(id).data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save<F: Scalar>(path: &Path, params: &ParamStore<F>, config: serde_json::Value) -> Result<()> {
    let bytes = encode(params, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    Ok((header, &bytes[12 + len..]))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0)
}

/// Overwrites every tensor of `params` from `bytes`. The manifest must list
/// exactly the same names and shapes in the same order; precision is converted.
pub fn decode_into<F: Scalar>(bytes: &[u8], params: &mut ParamStore<F>) -> Result<CheckpointHeader> {
    let (header, payload) = split_header(bytes)?;
    let manifest = params.manifest();
    if manifest.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            manifest.len()
        )));
    }
    for ((name, r, c), entry) in manifest.iter().zip(&header.tensors) {
        if *name != entry.name || [*r, *c] != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: model has {name} {r}x{c}, checkpoint has {} {}x{}",
                entry.name, entry.shape[0], entry.shape[1]
            )));
        }
    }
    let width = header.precision.byte_width();
    let expected: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum::<usize>() * width;
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest needs {expected}",
            payload.len()
        )));
    }
    let mut chunks = payload.chunks_exact(width);
    for id in params.ids().collect::<Vec<_>>() {
        let (r, c) = params.value(id).shape();
        let data = (0..r * c)
            .map(|_| {
                let b = chunks.next().expect("length checked");
                match header.precision {
                    Precision::F32 => F::from_f64(f32::read_le(b) as f64),
                    Precision::F64 => F::from_f64(f64::read_le(b)),
                }
            })
            .collect();
        *params.value_mut(id) = Matrix::from_vec(r, c, data);
    }
    Ok(header)
}

pub fn load_into<F: Scalar>(path: &Path, params: &mut ParamStore<F>) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_into(&bytes, params)
}

//! Single-file tensor container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON header,
//! then the payload of little-endian `f32` values. The header holds free-form
//! metadata plus a manifest of tensor names, shapes and byte offsets into the
//! payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{FseError, Result};

pub const MAGIC: &[u8; 8] = b"FSETNSR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<ManifestEntry>,
}

/// Serializes `tensors` (converted to `f32`) with `meta` into bytes.
pub fn encode_container(meta: &Value, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut manifest = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let offset = payload.len() as u64;
        for v in &values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset,
            nbytes: (values.len() * 4) as u64,
        });
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: manifest,
    })
    .map_err(|e| FseError::Format(format!("cannot encode container header: {e}")))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<(Value, BTreeMap<String, Tensor>)> {
    let bad = |m: &str| FseError::Format(format!("tensor container: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| bad(&format!("malformed header: {e}")))?;
    let payload = &bytes[header_end..];
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + entry.nbytes as usize;
        if entry.nbytes as usize != numel * 4 || end > payload.len() {
            return Err(bad(&format!("tensor `{}` has inconsistent extent", entry.name)));
        }
        let values: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(values, entry.shape.as_slice(), &Device::Cpu)?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(bad(&format!("duplicate tensor `{}`", entry.name)));
        }
    }
    Ok((header.meta, tensors))
}

pub fn write_container(path: &Path, meta: &Value, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_container(meta, tensors)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| FseError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| FseError::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(Value, BTreeMap<String, Tensor>)> {
    let bytes = fs::read(path).map_err(|e| FseError::io(path, e))?;
    decode_container(&bytes).map_err(|e| match e {
        FseError::Format(m) => FseError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

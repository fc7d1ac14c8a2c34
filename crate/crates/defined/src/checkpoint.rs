//! Checkpoint serialization.
//!
//! Layout: 8 magic bytes `DEFCKPT1`, a little-endian u32 header length, a
//! JSON header (version, model geometry, step counters, run metadata, and a
//! parameter manifest), then for each parameter in manifest order its value,
//! first-moment, and second-moment buffers as little-endian f32. Writes go
//! to a sibling temp file followed by a rename, so a crash never leaves a
//! half-written checkpoint at the target path.

use crate::model::ModelConfig;
use crate::nn::{Dims, ParamStore};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DEFCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub model: ModelConfig,
    /// Global training step at which the snapshot was taken.
    pub step: u64,
    /// Adam update count (bias-correction clock).
    pub adam_t: u64,
    /// Free-form run metadata (configs, phase), not interpreted on load.
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a parameter store. Byte output is a pure function of the
/// inputs, so saving twice yields identical files.
pub fn to_bytes(
    store: &ParamStore,
    model: ModelConfig,
    step: u64,
    meta: serde_json::Value,
) -> Result<Vec<u8>, CheckpointError> {
    let header = Header {
        version: VERSION,
        model,
        step,
        adam_t: store.adam_t(),
        meta,
        params: (0..store.len())
            .map(|i| {
                let p = store.param(i);
                ManifestEntry {
                    name: p.name.clone(),
                    rows: p.dims.rows,
                    cols: p.dims.cols,
                }
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header_json.len() + 12 * store.n_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(header_json.len()).unwrap().to_le_bytes());
    out.extend_from_slice(&header_json);
    for i in 0..store.len() {
        let p = store.param(i);
        push_f32s(&mut out, &p.value);
        push_f32s(&mut out, &p.m);
        push_f32s(&mut out, &p.v);
    }
    Ok(out)
}

/// Atomic save: temp file in the same directory, then rename over `path`.
pub fn save(
    path: &Path,
    store: &ParamStore,
    model: ModelConfig,
    step: u64,
    meta: serde_json::Value,
) -> Result<(), CheckpointError> {
    let bytes = to_bytes(store, model, step, meta)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_f32s(bytes: &[u8], offset: &mut usize, n: usize) -> Result<Vec<f32>, CheckpointError> {
    let need = 4 * n;
    let end = *offset + need;
    if end > bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {need} more bytes at offset {offset}, file has {}",
            bytes.len()
        )));
    }
    let out = bytes[*offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    *offset = end;
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Header, ParamStore), CheckpointError> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if 12 + header_len > bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
    if header.version != VERSION {
        return Err(CheckpointError::Version(header.version));
    }
    let mut store = ParamStore::new();
    let mut offset = 12 + header_len;
    for entry in &header.params {
        let dims = Dims::new(entry.rows, entry.cols);
        let value = read_f32s(bytes, &mut offset, dims.len())?;
        let m = read_f32s(bytes, &mut offset, dims.len())?;
        let v = read_f32s(bytes, &mut offset, dims.len())?;
        let i = store.register(&entry.name, dims, value.clone());
        store.load_value(i, value, m, v);
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after parameter data",
            bytes.len() - offset
        )));
    }
    store.set_adam_t(header.adam_t);
    Ok((header, store))
}

pub fn load(path: &Path) -> Result<(Header, ParamStore), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

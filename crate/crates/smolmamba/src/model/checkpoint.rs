//! Single-file model checkpoint.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! magic  b"SMOLCKPT"
//! u32    format version (1)
//! u32    config entry count
//!        per entry: u32 key len, key bytes, u32 value len, value bytes
//! u32    tensor count
//!        per tensor (names sorted lexicographically):
//!        u32 name len, name bytes, u32 rank, u32 dims[rank], f32 data (LE)
//! ```
//!
//! Parameters are stored under their names; batch-norm running
//! statistics under a `buffer.` prefix. Values are 32-bit floats.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ParamStore};
use crate::tensor::DenseTensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMOLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn config_entries(cfg: &ModelConfig) -> Vec<(String, String)> {
    let value = toml::Value::try_from(cfg).expect("config serializes");
    let table = value.as_table().expect("config is a table");
    table
        .iter()
        .map(|(k, v)| (k.clone(), v.to_string()))
        .collect()
}

fn config_from_entries(entries: &[(String, String)]) -> Result<ModelConfig, CheckpointError> {
    let text: String = entries
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    toml::from_str(&text).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))
}

fn write_u32(out: &mut impl Write, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn write_str(out: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(out, s.len() as u32)?;
    out.write_all(s.as_bytes())
}

fn read_u32(input: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(input: &mut impl Read) -> Result<String, CheckpointError> {
    let len = read_u32(input)? as usize;
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

/// Serialize a checkpoint into bytes.
pub fn encode(cfg: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    write_u32(&mut out, CHECKPOINT_VERSION).unwrap();
    let entries = config_entries(cfg);
    write_u32(&mut out, entries.len() as u32).unwrap();
    for (k, v) in &entries {
        write_str(&mut out, k).unwrap();
        write_str(&mut out, v).unwrap();
    }
    // merge params and buffers under one sorted namespace
    let mut tensors: BTreeMap<String, &DenseTensor> = BTreeMap::new();
    for (name, t) in &store.params {
        tensors.insert(name.clone(), t);
    }
    for (name, t) in &store.buffers {
        tensors.insert(format!("buffer.{name}"), t);
    }
    write_u32(&mut out, tensors.len() as u32).unwrap();
    for (name, t) in tensors {
        write_str(&mut out, &name).unwrap();
        write_u32(&mut out, t.rank() as u32).unwrap();
        for &d in t.shape() {
            write_u32(&mut out, d as u32).unwrap();
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parse checkpoint bytes into the stored configuration and parameters.
pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ParamStore), CheckpointError> {
    let mut input = bytes;
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let n_config = read_u32(&mut input)? as usize;
    let mut entries = Vec::with_capacity(n_config);
    for _ in 0..n_config {
        let k = read_str(&mut input)?;
        let v = read_str(&mut input)?;
        entries.push((k, v));
    }
    let cfg = config_from_entries(&entries)?;
    let n_tensors = read_u32(&mut input)? as usize;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = read_str(&mut input)?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut buf = [0u8; 4];
            input.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        let tensor = DenseTensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        match name.strip_prefix("buffer.") {
            Some(buf_name) => buffers.insert(buf_name.to_string(), tensor),
            None => params.insert(name, tensor),
        };
    }
    Ok((cfg, ParamStore { params, buffers }))
}

/// Write a checkpoint atomically (temp file, then rename).
pub fn save(
    path: &Path,
    cfg: &ModelConfig,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let bytes = encode(cfg, store);
    crate::cli::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ParamStore), CheckpointError> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

//! Binary container for checkpoints and compressed-state files.
//!
//! Layout: a magic string, an 8-byte little-endian length, a UTF-8 JSON
//! header describing every tensor (`{name, dtype, shape, byte_offset,
//! byte_len}`) plus file-specific metadata, then the raw little-endian
//! row-major payloads. Offsets are relative to the end of the header.
//! Writing f64 and reading it back is bit-exact; f32 payloads are accepted
//! and widened on read.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LCKP1";
pub const STATE_MAGIC: &[u8; 5] = b"LCST1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    config_hash: u64,
    tensors: Vec<TensorEntry>,
}

fn entries_for(tensors: &[(String, &Tensor)]) -> Vec<TensorEntry> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let byte_len = (t.numel() * 8) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f64".to_string(),
            shape: t.shape.clone(),
            byte_offset: offset,
            byte_len,
        });
        offset += byte_len;
    }
    entries
}

fn write_container(
    path: &Path,
    magic: &[u8; 5],
    header_json: &str,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(magic)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(header_json.as_bytes())?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        buf.reserve(t.numel() * 8);
        for &x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        file.write_all(&buf)?;
    }
    file.flush()?;
    Ok(())
}

fn read_container(path: &Path, magic: &[u8; 5]) -> Result<(String, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 13 || &bytes[..5] != magic {
        return Err(Error::Format(format!(
            "{}: missing {} magic",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[5..13]);
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let payload_start = 13 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Format(format!(
            "{}: header length {} exceeds file size",
            path.display(),
            header_len
        )));
    }
    let header = String::from_utf8(bytes[13..payload_start].to_vec())
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    Ok((header, bytes[payload_start..].to_vec()))
}

fn decode_tensor(entry: &TensorEntry, payload: &[u8]) -> Result<Tensor> {
    let start = entry.byte_offset as usize;
    let end = start + entry.byte_len as usize;
    if end > payload.len() {
        return Err(Error::Format(format!(
            "tensor `{}` extends past end of payload",
            entry.name
        )));
    }
    let raw = &payload[start..end];
    let numel: usize = entry.shape.iter().product();
    let data: Vec<f64> = match entry.dtype.as_str() {
        "f64" => {
            if raw.len() != numel * 8 {
                return Err(Error::Format(format!(
                    "tensor `{}`: {} bytes for {} f64 elements",
                    entry.name,
                    raw.len(),
                    numel
                )));
            }
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        "f32" => {
            if raw.len() != numel * 4 {
                return Err(Error::Format(format!(
                    "tensor `{}`: {} bytes for {} f32 elements",
                    entry.name,
                    raw.len(),
                    numel
                )));
            }
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        other => {
            return Err(Error::Format(format!(
                "tensor `{}` has unsupported dtype `{other}`",
                entry.name
            )))
        }
    };
    Tensor::new(entry.shape.clone(), data)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
}

/// Write a model checkpoint ("LCKP1").
pub fn save(path: &Path, config: &ModelConfig, params: &Params) -> Result<()> {
    let tensors: Vec<(String, &Tensor)> =
        params.iter().map(|(k, v)| (k.clone(), v)).collect();
    let header = CheckpointHeader {
        config: config.clone(),
        tensors: entries_for(&tensors),
    };
    let json = serde_json::to_string(&header)?;
    write_container(path, CHECKPOINT_MAGIC, &json, &tensors)
}

/// Read a model checkpoint ("LCKP1").
pub fn load(path: &Path) -> Result<Checkpoint> {
    let (header_json, payload) = read_container(path, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = serde_json::from_str(&header_json)?;
    header.config.validate()?;
    let mut params = Params::new();
    for entry in &header.tensors {
        params.insert(&entry.name, decode_tensor(entry, &payload)?);
    }
    Ok(Checkpoint {
        config: header.config,
        params,
    })
}

/// Write a compressed-state file ("LCST1"): the running block stack plus
/// the step index and the hash of the config that produced it.
pub fn save_state(
    path: &Path,
    step: u64,
    config_hash: u64,
    blocks: &[(String, &Tensor)],
) -> Result<()> {
    let header = StateHeader {
        step,
        config_hash,
        tensors: entries_for(blocks),
    };
    let json = serde_json::to_string(&header)?;
    write_container(path, STATE_MAGIC, &json, blocks)
}

/// Read a compressed-state file ("LCST1").
pub fn load_state(path: &Path) -> Result<(u64, u64, Vec<(String, Tensor)>)> {
    let (header_json, payload) = read_container(path, STATE_MAGIC)?;
    let header: StateHeader = serde_json::from_str(&header_json)?;
    let mut blocks = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        blocks.push((entry.name.clone(), decode_tensor(entry, &payload)?));
    }
    Ok((header.step, header.config_hash, blocks))
}

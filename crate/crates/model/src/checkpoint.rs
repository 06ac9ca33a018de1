//! `VAHCKPT1` checkpoints: magic, u64 LE header length, JSON header, f32 LE values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::net::{build_model, Model};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VAHCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the value section, in f32 elements.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    config_hash: String,
    step: u64,
    params: Vec<Entry>,
}

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut values: Vec<u8> = Vec::with_capacity(model.store.numel() * 4);
    let mut offset = 0;
    for (name, shape, data) in model.store.export() {
        entries.push(Entry { name, shape, offset });
        offset += data.len();
        for v in data {
            values.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        config_hash: model.config.hash(),
        step: model.store.step(),
        params: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + values.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&values);
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing VAHCKPT1 magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(bad("header length exceeds file size".into()));
    }
    let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let values = &body[header_len..];
    if !values.len().is_multiple_of(4) {
        return Err(bad("value section is not a whole number of f32s".into()));
    }
    let total = values.len() / 4;
    let mut model = build_model::<f32>(&header.config, 0).map_err(|e| bad(format!("invalid config: {e}")))?;
    if header.params.len() != model.store.len() {
        return Err(bad(format!("checkpoint has {} parameters, model has {}", header.params.len(), model.store.len())));
    }
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        if e.offset + n > total {
            return Err(bad(format!("parameter {} runs past the end of the file", e.name)));
        }
        let data = values[e.offset * 4..(e.offset + n) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        model.store.load(&e.name, &e.shape, data).map_err(|err| bad(err.to_string()))?;
    }
    let used: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if used != total {
        return Err(bad(format!("{} trailing values", total.saturating_sub(used))));
    }
    model.store.set_step(header.step);
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode_checkpoint(model)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Hash stored in a checkpoint header, without loading the parameters.
pub fn checkpoint_config(path: impl AsRef<Path>) -> Result<(ModelConfig, String)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "missing VAHCKPT1 magic"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header: Header = bytes
        .get(16..16 + n)
        .ok_or_else(|| Error::format(path, "header length exceeds file size"))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| Error::format(path, format!("bad header: {e}"))))?;
    Ok((header.config, header.config_hash))
}

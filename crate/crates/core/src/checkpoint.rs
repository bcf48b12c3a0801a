//! `PFGT` model files.
//!
//! Layout: the bytes `PFGT`, a little-endian `u32` format version, a
//! little-endian `u32` byte length, that many bytes of UTF-8 JSON header, and
//! then every parameter as raw little-endian `f32` values in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Parameter, Tensor};
use crate::prompt_pool::PromptPool;

pub const MAGIC: &[u8; 4] = b"PFGT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub encoder: EncoderConfig,
    pub lora_enabled: bool,
    pub params: Vec<ParamEntry>,
    pub active: Vec<bool>,
    pub purged: Vec<bool>,
    pub pool_seed: u64,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

/// Serializes `model` with optional free-form `metadata` (e.g. the run
/// configuration that produced it).
pub fn to_bytes(model: &Model, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let params = model.all_params();
    let mut offset = 0u64;
    let entries = params
        .iter()
        .map(|p| {
            let e = ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                frozen: p.frozen,
                offset,
            };
            offset += 4 * p.tensor.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        encoder: model.config().clone(),
        lora_enabled: model.encoder.lora_enabled(),
        params: entries,
        active: model.pool.active_mask().to_vec(),
        purged: model.pool.purged_mask().to_vec(),
        pool_seed: model.pool.seed(),
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;

    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(model: &Model, path: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(model, metadata)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Header only, without materializing the weights.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a PFGT file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    Ok((header, 12 + len))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, serde_json::Value)> {
    let (header, data_start) = read_header(bytes)?;
    let data = &bytes[data_start..];
    let cfg = &header.encoder;
    let k = cfg.num_classes;
    if header.active.len() != k || header.purged.len() != k {
        return Err(Error::Checkpoint(format!("mask length does not match {k} classes")));
    }

    let mut tensors = std::collections::HashMap::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = data
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", e.name)))?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(e.name.as_str(), (Tensor::new(e.shape.clone(), values)?, e.frozen)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {}", e.name)));
        }
    }

    let mut model = Model::init(cfg, 0)?;
    if !header.lora_enabled {
        model.encoder = model.encoder.strip_lora();
    }
    let mut take = |p: &mut Parameter| -> Result<()> {
        let (t, frozen) = tensors
            .remove(p.name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.tensor.shape()
            )));
        }
        *p = Parameter::new(p.name.clone(), t, frozen);
        Ok(())
    };
    for p in model.encoder.params_mut() {
        take(p)?;
    }
    let mut prompts: Vec<Parameter> = model.pool.blocks().to_vec();
    for p in &mut prompts {
        take(p)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }
    if let Some(c) = (0..k).find(|c| header.active[*c] && header.purged[*c]) {
        return Err(Error::Checkpoint(format!("class {c} is marked both active and purged")));
    }
    model.pool = PromptPool::from_parts(prompts, header.active, header.purged, header.pool_seed);
    Ok((model, header.metadata))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, serde_json::Value)> {
    from_bytes(&fs::read(path)?)
}

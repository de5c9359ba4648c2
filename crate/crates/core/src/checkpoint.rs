//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//! magic (4 bytes), version (u32), record length (u64), UTF-8 JSON record,
//! then one entry per tensor in lexicographic name order:
//! name length (u64), name bytes, rank (u32), dims (u64 each), f32 data.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use maskdiff_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterSet};

pub const MODEL_MAGIC: &[u8; 4] = b"MDLM";
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"MDOS";
pub const FORMAT_VERSION: u32 = 1;

/// The JSON record stored ahead of the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub model: ModelConfig,
    /// Characters of the tokenizer, in id order after the reserved ids.
    #[serde(default)]
    pub vocab: Option<String>,
    /// Training iterations completed when this file was written.
    #[serde(default)]
    pub iteration: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub(crate) fn write_container<W: Write>(
    w: &mut W,
    magic: &[u8; 4],
    record: &impl Serialize,
    tensors: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(record).map_err(|e| bad(e.to_string()))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Guards against absurd allocations from corrupt length fields.
fn bounded(n: u64, limit: u64, what: &str) -> Result<usize> {
    if n > limit {
        return Err(bad(format!("{what} of {n} exceeds limit {limit}")));
    }
    Ok(n as usize)
}

pub(crate) fn read_container<R: Read, M: for<'de> Deserialize<'de>>(
    r: &mut R,
    magic: &[u8; 4],
) -> Result<(M, BTreeMap<String, Tensor<f32>>)> {
    let mut head = [0u8; 4];
    r.read_exact(&mut head).map_err(|_| bad("file too short for magic"))?;
    if &head != magic {
        return Err(bad(format!("magic {:?} does not match {:?}", head, magic)));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = bounded(read_u64(r)?, 1 << 24, "record length")?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let record: M = serde_json::from_slice(&json).map_err(|e| bad(format!("config record: {e}")))?;

    let mut tensors = BTreeMap::new();
    let mut previous: Option<String> = None;
    loop {
        let mut first = [0u8; 8];
        match r.read(&mut first[..1])? {
            0 => break,
            _ => r.read_exact(&mut first[1..])?,
        }
        let name_len = bounded(u64::from_le_bytes(first), 4096, "name length")?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        if previous.as_ref().is_some_and(|p| p >= &name) {
            return Err(bad(format!("parameter {name} out of lexicographic order")));
        }
        let rank = bounded(read_u32(r)? as u64, 8, "rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(bounded(read_u64(r)?, 1 << 32, "dimension")?);
        }
        let numel: usize = shape.iter().product();
        bounded(numel as u64, 1 << 32, "element count")?;
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.insert(name.clone(), Tensor::new(shape, data)?);
        previous = Some(name);
    }
    Ok((record, tensors))
}

/// Writes via a temporary sibling and a rename so a crash never leaves a torn file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_bytes(record: &CheckpointRecord, params: &ParameterSet<f32>) -> Result<Vec<u8>> {
    let map: BTreeMap<String, Tensor<f32>> = params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    let mut out = Vec::new();
    write_container(&mut out, MODEL_MAGIC, record, &map)?;
    Ok(out)
}

pub fn save_checkpoint(path: &Path, record: &CheckpointRecord, params: &ParameterSet<f32>) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(record, params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointRecord, Model<f32>)> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(CheckpointRecord, Model<f32>)> {
    let (record, tensors): (CheckpointRecord, _) = read_container(&mut &bytes[..], MODEL_MAGIC)?;
    let model = Model::new(record.model.clone(), ParameterSet::from_map(tensors))?;
    Ok((record, model))
}

//! Binary container shared by datasets and checkpoints: a little-endian
//! `u32` header length, a JSON header, then every array as little-endian
//! `f64` values in header order.

use salb_core::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    version: u32,
    meta: Value,
    arrays: Vec<ArrayShape>,
}

pub fn encode<M: Serialize>(magic: &str, meta: &M, arrays: &[(&str, &Matrix)]) -> Result<Vec<u8>> {
    let header = Header {
        magic: magic.to_string(),
        version: VERSION,
        meta: serde_json::to_value(meta).map_err(|e| Error::format(e.to_string(), None))?,
        arrays: arrays.iter().map(|(name, m)| ArrayShape { name: name.to_string(), rows: m.rows(), cols: m.cols() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(e.to_string(), None))?;
    let total: usize = arrays.iter().map(|(_, m)| m.as_slice().len() * 8).sum();
    let mut out = Vec::with_capacity(4 + json.len() + total);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in arrays {
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decoded metadata and arrays, with names checked against `expected`.
pub fn decode<M: DeserializeOwned>(bytes: &[u8], magic: &str, expected: &[&str]) -> Result<(M, Vec<Matrix>)> {
    let len_bytes: [u8; 4] = bytes.get(..4).and_then(|b| b.try_into().ok()).ok_or_else(|| Error::format("file shorter than its length prefix", None))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    if len > MAX_HEADER || bytes.len() < 4 + len {
        return Err(Error::format(format!("header length {len} exceeds the file"), None));
    }
    let raw: Value = serde_json::from_slice(&bytes[4..4 + len]).map_err(|e| Error::format(format!("unreadable header: {e}"), None))?;
    let version = raw.get("version").and_then(Value::as_u64).map(|v| v as u32);
    match raw.get("magic").and_then(Value::as_str) {
        Some(m) if m == magic => {}
        other => return Err(Error::format(format!("expected magic {magic:?}, found {other:?}"), version)),
    }
    if version != Some(VERSION) {
        return Err(Error::format(format!("unsupported version, this build reads version {VERSION}"), version));
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::format(format!("bad header: {e}"), version))?;
    let names: Vec<&str> = header.arrays.iter().map(|a| a.name.as_str()).collect();
    if names != expected {
        return Err(Error::format(format!("expected arrays {expected:?}, found {names:?}"), version));
    }
    let meta: M = serde_json::from_value(header.meta).map_err(|e| Error::format(format!("bad metadata: {e}"), version))?;

    let mut data = &bytes[4 + len..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for a in &header.arrays {
        let count = a.rows.checked_mul(a.cols).filter(|c| c.checked_mul(8).is_some_and(|b| b <= data.len()));
        let Some(count) = count else {
            return Err(Error::format(format!("array {} ({}x{}) is truncated", a.name, a.rows, a.cols), version));
        };
        let (chunk, rest) = data.split_at(count * 8);
        let values = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        arrays.push(Matrix::new(a.rows, a.cols, values).map_err(|e| Error::format(format!("array {}: {e}", a.name), version))?);
        data = rest;
    }
    if !data.is_empty() {
        return Err(Error::format(format!("{} trailing bytes after the last array", data.len()), version));
    }
    Ok((meta, arrays))
}

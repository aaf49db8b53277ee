//! Self-describing binary container used for feature caches, anomaly maps and
//! checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON
//! header, then a contiguous little-endian `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DNMLYF32";

/// Headers larger than this are treated as corruption.
const MAX_HEADER: u64 = 64 << 20;

pub fn write_framed<H: Serialize>(path: &Path, header: &H, payload: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let json = serde_json::to_vec(header)?;
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for v in payload {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_framed<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::data_at(path, "not a framed array file (bad magic)"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::data_at(path, format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: H = serde_json::from_slice(&json)
        .map_err(|e| Error::data_at(path, format!("malformed header: {e}")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::data_at(path, "payload is not a whole number of f32 values"));
    }
    let payload = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}

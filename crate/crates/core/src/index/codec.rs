//! On-disk index layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DRGIDX01"
//! version    u32      1
//! dimension  u32
//! count      u64
//! count x {
//!     id_len       u32
//!     id           id_len bytes, UTF-8
//!     payload_len  u32
//!     payload      payload_len bytes, JSON object, UTF-8
//!     vector       dimension x f32
//! }
//! ```

use std::collections::HashSet;

use serde_json::Value;

use super::{IndexError, VectorEntry};

pub const MAGIC: &[u8; 8] = b"DRGIDX01";
pub const FORMAT_VERSION: u32 = 1;

pub(super) fn encode(dimension: usize, entries: &[VectorEntry]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + entries.len() * (dimension * 4 + 64));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dimension as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        let payload = serde_json::to_vec(&e.payload).expect("JSON map serializes");
        out.extend_from_slice(&(e.entry_id.len() as u32).to_le_bytes());
        out.extend_from_slice(e.entry_id.as_bytes());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        for x in &e.vector {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IndexError> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn corrupt(offset: usize, reason: impl Into<String>) -> IndexError {
    IndexError::CorruptIndex {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<(usize, Vec<VectorEntry>), IndexError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(IndexError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dim_offset = r.pos;
    let dimension = r.u32("dimension")? as usize;
    if dimension == 0 {
        return Err(corrupt(dim_offset, "dimension is zero"));
    }
    let count = r.u64("entry count")?;
    // Each entry needs at least 8 length bytes plus its vector.
    let min_entry = 8 + dimension * 4;
    let mut entries = Vec::with_capacity((count as usize).min(r.remaining() / min_entry));
    let mut ids = HashSet::new();
    for _ in 0..count {
        let id_offset = r.pos;
        let id_len = r.u32("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "entry id")?)
            .map_err(|_| corrupt(id_offset + 4, "entry id is not UTF-8"))?
            .to_string();
        if !ids.insert(id.clone()) {
            return Err(corrupt(id_offset, format!("duplicate entry id {id:?}")));
        }
        let payload_offset = r.pos;
        let payload_len = r.u32("payload length")? as usize;
        let payload = match serde_json::from_slice::<Value>(r.take(payload_len, "payload")?) {
            Ok(Value::Object(map)) => map,
            _ => return Err(corrupt(payload_offset + 4, "payload is not a JSON object")),
        };
        let vector_offset = r.pos;
        let raw = r.take(dimension * 4, "vector")?;
        let vector: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(corrupt(vector_offset, "vector contains a non-finite value"));
        }
        entries.push(VectorEntry {
            entry_id: id,
            vector,
            payload,
        });
    }
    if r.remaining() != 0 {
        return Err(corrupt(r.pos, "trailing bytes after last entry"));
    }
    Ok((dimension, entries))
}

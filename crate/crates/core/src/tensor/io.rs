//! "ECT1" tensor files: the magic bytes `ECT1`, the rank as a little-endian
//! u64, one little-endian u64 per extent, then the values as little-endian
//! f64 in row-major order.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ECT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * (1 + t.rank() + t.numel()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |detail: String| Error::format(path, detail);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing ECT1 header".into()));
    }
    let word = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8-byte slice")))
            .ok_or_else(|| bad(format!("truncated at byte {at}")))
    };
    let rank = word(4)? as usize;
    if rank == 0 || rank > 16 {
        return Err(bad(format!("implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|d| word(12 + 8 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 12 + 8 * rank;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad(format!("extent overflow in {shape:?}")))?;
    let expected = start + 8 * count;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for shape {shape:?}, found {}",
            bytes.len()
        )));
    }
    let data = bytes[start..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

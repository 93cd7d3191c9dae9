//! Binary per-video feature files: magic `WTALFEAT`, a version byte, `u32`
//! frame count and width, then the row-major little-endian `f64` payload.

use std::path::Path;

use wtal_core::Tensor;

use crate::error::{read, write, Result, WtalError};

pub const MAGIC: &[u8; 8] = b"WTALFEAT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = MAGIC.len() + 1 + 4 + 4;

pub fn encode(values: &Tensor) -> Vec<u8> {
    let (t, d) = (values.rows(), values.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + t * d * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&values.to_le_bytes());
    out
}

/// Parse a feature file image; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: String| WtalError::format(path, reason);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic, expected WTALFEAT".into()));
    }
    if bytes[8] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[8])));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (t, d) = (u32_at(9), u32_at(13));
    let payload = &bytes[HEADER_LEN..];
    let expected = t.checked_mul(d).and_then(|n| n.checked_mul(8));
    if expected != Some(payload.len()) {
        return Err(bad(format!("payload is {} bytes, header declares {t}×{d} f64", payload.len())));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(bad(format!("non-finite value at frame {}", i / d.max(1))));
    }
    Ok(Tensor::new(vec![t, d], data)?)
}

pub fn write_features(path: &Path, values: &Tensor) -> Result<()> {
    write(path, &encode(values))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    decode(&read(path)?, path)
}

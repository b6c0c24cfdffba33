//! Binary-in-JSON helpers: f64 arrays as base64-encoded little-endian bytes.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use crate::error::{Error, Result};

pub fn f64s_to_base64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn base64_to_f64s(encoded: &str, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(encoded)
        .map_err(|e| Error::Corrupt(format!("bad base64 tensor data: {e}")))?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::Corrupt(format!(
            "tensor data holds {} bytes, expected {}",
            bytes.len(),
            expected_len * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

//! The HSTN tensor file: magic `HSTN`, u32 LE rank, `rank` u32 LE dims,
//! then the values as f32 LE.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HSTN";

pub fn encode_hstn<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let shape = t.shape();
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_hstn<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let take = |at: usize, what: &str| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Format(format!("truncated HSTN file: missing {what}")))
    };
    match bytes.get(..4) {
        Some(m) if m == MAGIC => {}
        Some(m) => return Err(Error::Format(format!("bad HSTN magic {m:02x?}"))),
        None => return Err(Error::Format(format!("bad HSTN magic {bytes:02x?} (file too short)"))),
    }
    let rank = take(4, "rank")? as usize;
    if bytes.len() < 8 + 4 * rank {
        return Err(Error::Format(format!("truncated HSTN file: rank {rank} needs {} header bytes", 8 + 4 * rank)));
    }
    let dims = (0..rank).map(|i| take(8 + 4 * i, "dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format(format!("HSTN dims {dims:?} overflow")))?;
    let start = 8 + 4 * rank;
    let payload = &bytes[start..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "truncated HSTN payload: expected {} bytes for dims {dims:?}, found {}",
            count * 4,
            payload.len()
        )));
    }
    let data = payload.chunks_exact(4).map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().unwrap())))).collect();
    Tensor::new(dims, data).map_err(|e| Error::Format(format!("invalid HSTN tensor: {e}")))
}

pub fn write_hstn<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    super::write_atomic(path, &encode_hstn(t))
}

pub fn read_hstn<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_hstn(&std::fs::read(path)?)
}

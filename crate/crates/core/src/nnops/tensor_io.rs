//! Raw tensor files: `FTSR` magic, `u32` rank, `u32` dims, little-endian `f32` payload.

use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 4] = b"FTSR";

#[derive(Debug, Error, PartialEq)]
pub enum TensorIoError {
    #[error("missing FTSR magic")]
    BadMagic,
    #[error("tensor file truncated")]
    Truncated,
    #[error("payload holds {actual} floats, dims require {expected}")]
    SizeMismatch { expected: usize, actual: usize },
}

pub fn write_ftsr(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_ftsr(bytes: &[u8]) -> Result<Tensor, TensorIoError> {
    if bytes.len() < 8 {
        return Err(TensorIoError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    let word = |i: usize| -> Result<u32, TensorIoError> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(TensorIoError::Truncated)
    };
    let rank = word(4)? as usize;
    let dims = (0..rank)
        .map(|i| word(8 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let start = 8 + 4 * rank;
    let payload = &bytes[start..];
    let expected: usize = dims.iter().product();
    if payload.len() != 4 * expected {
        return Err(TensorIoError::SizeMismatch {
            expected,
            actual: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor { shape: dims, data })
}

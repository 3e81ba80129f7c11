//! `WTNS1` tensor container.
//!
//! Layout: magic `WTNS1`, one dtype byte (0 = f32, 1 = f64), rank as a
//! little-endian `u32`, `rank` little-endian `u64` extents, then the
//! row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::tensor::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"WTNS1";

/// A decoded tensor of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested element type (exact when it matches).
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 10 || &bytes[..5] != MAGIC {
        return Err(bad("missing WTNS1 magic".into()));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| bad(format!("unknown dtype code {}", bytes[5])))?;
    let rank = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let header = 10 + 8 * rank;
    if bytes.len() < header {
        return Err(bad(format!("truncated header for rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().expect("8 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n * dtype.size() {
        return Err(bad(format!(
            "payload of {} bytes does not match shape {shape:?}",
            payload.len()
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(
            Tensor::new(&shape, payload.chunks_exact(4).map(f32::read_le).collect()).map_err(|e| bad(e.to_string()))?,
        ),
        DType::F64 => AnyTensor::F64(
            Tensor::new(&shape, payload.chunks_exact(8).map(f64::read_le).collect()).map_err(|e| bad(e.to_string()))?,
        ),
    })
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads a tensor and converts it to `T`.
pub fn read_as<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    read(path).map(AnyTensor::into_tensor)
}

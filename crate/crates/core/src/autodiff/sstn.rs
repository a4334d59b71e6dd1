//! `SSTN v1` tensor files.
//!
//! Little-endian layout: the magic bytes `SSTN`, a `u32` version (1), a
//! `u32` rank, `rank` `u32` dimensions, then the values as row-major `f64`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"SSTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SstnError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported SSTN version {0}")]
    BadVersion(u32),
    #[error("corrupt tensor file: {0}")]
    Corrupt(String),
}

/// Raw decoded contents.
#[derive(Clone, Debug, PartialEq)]
pub struct SstnTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode(dims: &[usize], values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 8 * values.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, SstnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| SstnError::Corrupt(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode(mut bytes: &[u8]) -> Result<SstnTensor, SstnError> {
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic).map_err(|_| SstnError::Corrupt("truncated header".into()))?;
    if magic != MAGIC {
        return Err(SstnError::BadMagic(magic));
    }
    let version = read_u32(&mut bytes, "version")?;
    if version != VERSION {
        return Err(SstnError::BadVersion(version));
    }
    let rank = read_u32(&mut bytes, "rank")? as usize;
    let dims = (0..rank).map(|_| read_u32(&mut bytes, "dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let count: usize = dims.iter().product();
    if bytes.len() != count * 8 {
        return Err(SstnError::Corrupt(format!("expected {} value bytes for dims {dims:?}, found {}", count * 8, bytes.len())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(SstnTensor { dims, values })
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<(), SstnError> {
    let bytes = encode(t.shape(), &t.to_f64_vec());
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<SstnTensor, SstnError> {
    decode(&fs::read(path)?)
}

/// Reads a file as a constant tensor.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>, SstnError> {
    let raw = read_raw(path)?;
    Tensor::from_f64(&raw.dims, &raw.values).map_err(|e| SstnError::Corrupt(e.to_string()))
}

//! `VCT1` tensor container.
//!
//! Layout: magic `b"VCT1"`, `u8` dtype (0 = f32, 1 = f64), `u8` ndim,
//! `ndim` little-endian `u64` dims, then the row-major little-endian payload.

use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VCT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Decode one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_tensor<T: Real>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let bad = |msg: String| Err(Error::validation(msg));
    if bytes.len() < 6 {
        return bad(format!("tensor header truncated ({} bytes)", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return bad("bad tensor magic".into());
    }
    let Some(dtype) = DType::from_code(bytes[4]) else {
        return bad(format!("unknown dtype code {}", bytes[4]));
    };
    if dtype != T::DTYPE {
        return bad(format!("dtype {:?} stored, {:?} requested", dtype, T::DTYPE));
    }
    let ndim = bytes[5] as usize;
    let mut pos = 6;
    if bytes.len() < pos + 8 * ndim {
        return bad("tensor dims truncated".into());
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for _ in 0..ndim {
        let d = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes"));
        pos += 8;
        let d = usize::try_from(d).map_err(|_| Error::validation("dimension overflows usize"))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::validation("element count overflows"))?;
        dims.push(d);
    }
    let width = dtype.width();
    let need = count
        .checked_mul(width)
        .and_then(|n| n.checked_add(pos))
        .ok_or_else(|| Error::validation("payload size overflows"))?;
    if bytes.len() < need {
        return bad(format!("tensor payload truncated: need {} bytes, have {}", need, bytes.len()));
    }
    let data = bytes[pos..need].chunks_exact(width).map(T::read_le).collect();
    Ok((Tensor::new(dims, data)?, need))
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes)
        .map_err(|e| Error::validation(format!("{}: {}", path.display(), e)))?;
    if used != bytes.len() {
        return Err(Error::validation(format!(
            "{}: {} trailing bytes after tensor",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

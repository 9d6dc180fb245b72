//! Flat binary tensor container.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! b"VFFCTNSR" | version: u32 | rank: u32 | shape: rank x u64 | data: numel x f64
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const TENSOR_MAGIC: &[u8; 8] = b"VFFCTNSR";
pub const TENSOR_VERSION: u32 = 1;

const MAX_RANK: u32 = 16;

pub fn write_raw<W: Write>(w: &mut W, shape: &[usize], data: &[f64]) -> Result<()> {
    debug_assert_eq!(numel(shape), data.len());
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_raw(w, t.shape(), t.data())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::invalid("tensor container", msg)
}

pub fn read_raw<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(bad(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("shape overflows"))?;
    let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| bad("shape overflows"))?];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let (shape, data) = read_raw(r)?;
    Tensor::new(&shape, data)
}

//! Portable tensor files.
//!
//! A tensor record is the magic `FDT1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dims, then the values as little-endian `f32`.
//! A named container (used for model weights) is a sequence of entries, each
//! a little-endian `u32` name length, the UTF-8 name, then a tensor record.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FDT1";

/// Serializes with the tensor's full rank-4 dims.
pub fn write_record(w: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    write_record_dims(w, &t.dims(), t.data())
}

pub fn write_record_dims(w: &mut impl Write, dims: &[usize], data: &[f32]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Format(format!(
            "dims {dims:?} do not match {} values",
            data.len()
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record. Ranks below 4 are left-padded with unit dims; higher
/// ranks must have unit leading dims.
pub fn read_record(r: &mut impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let dims = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = dims.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut d4 = [1usize; 4];
    if rank <= 4 {
        d4[4 - rank..].copy_from_slice(&dims);
    } else {
        if dims[..rank - 4].iter().any(|&d| d != 1) {
            return Err(Error::Format(format!(
                "cannot view dims {dims:?} as rank 4"
            )));
        }
        d4.copy_from_slice(&dims[rank - 4..]);
    }
    Tensor::from_vec(d4, data)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_record(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    read_record(&mut bytes.as_slice())
}

pub fn write_named(path: &Path, entries: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_record(&mut buf, t)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_named(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut out = Vec::new();
    while !r.is_empty() {
        let len = read_u32(&mut r)? as usize;
        if len > r.len() {
            return Err(Error::Format("truncated entry name".into()));
        }
        let (name, rest) = r.split_at(len);
        let name = String::from_utf8(name.to_vec())
            .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?;
        r = rest;
        out.push((name, read_record(&mut r)?));
    }
    Ok(out)
}

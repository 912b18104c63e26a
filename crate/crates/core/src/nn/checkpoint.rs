//! Parameter checkpoint container.
//!
//! Little-endian layout: magic `CMPW`, version `u16 = 1`, element width `u8`
//! (4 or 8), metadata length `u32` + UTF-8 JSON, tensor count `u32`, then per
//! tensor: name length `u16` + UTF-8 name, rank `u8`, dims `u32 × rank`, data.

use std::path::Path;

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMPW";
pub const VERSION: u16 = 1;

pub fn encode<T: Scalar>(params: &ParamSet<T>, meta: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::WIDTH);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<T: Scalar>(path: &Path, params: &ParamSet<T>, meta: &str) -> Result<()> {
    write_atomic(path, &encode(params, meta))
}

/// Reads a checkpoint, converting stored elements to `T` if the width differs.
pub fn decode<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<(ParamSet<T>, String)> {
    let mut r = Reader::new(path, bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "CMPW",
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: VERSION,
        });
    }
    let width = r.u8("element width")?;
    if width != 4 && width != 8 {
        return Err(r.format(format!("unsupported element width {width}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = String::from_utf8(r.take(meta_len, "metadata")?.to_vec())
        .map_err(|_| r.format("metadata is not UTF-8".into()))?;
    let count = r.u32("tensor count")? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| r.format("tensor name is not UTF-8".into()))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * width as usize, "tensor data")?;
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect()
        };
        names.push(name);
        tensors.push(Tensor::from_vec(&shape, data)?);
    }
    if !r.is_at_end() {
        return Err(r.format("trailing bytes after last tensor".into()));
    }
    Ok((ParamSet::from_parts(names, tensors), meta))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamSet<T>, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian): magic `SGEOCKPT`, version `u32`,
//! record count `u32`, then per record: name length `u32`, UTF-8 name,
//! rank `u32`, one `u32` per extent, and the payload as `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::param::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SGEOCKPT";
pub const VERSION: u32 = 1;

/// Named tensors in checkpoint order.
pub type Records = Vec<(String, Tensor<f32>)>;

pub fn encode(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Records> {
    let bad = |msg: String| Error::format(path, msg);
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("missing SGEOCKPT magic".into()));
    }
    let version = c.u32().ok_or_else(|| bad("truncated header".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32().ok_or_else(|| bad("truncated header".into()))?;
    let mut records = Vec::with_capacity(count as usize);
    for idx in 0..count {
        let rec = |what: &str| bad(format!("record {idx}: {what}"));
        let nlen = c.u32().ok_or_else(|| rec("truncated name length"))? as usize;
        let name = c.take(nlen).ok_or_else(|| rec("truncated name"))?;
        let name = std::str::from_utf8(name)
            .map_err(|_| rec("name is not UTF-8"))?
            .to_string();
        let rec = |what: &str| bad(format!("record {idx} ({name}): {what}"));
        let rank = c.u32().ok_or_else(|| rec("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32().ok_or_else(|| rec("truncated extents"))? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = c
            .take(n.checked_mul(4).ok_or_else(|| rec("payload too large"))?)
            .ok_or_else(|| rec("truncated payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push((name, Tensor::from_vec(&shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Records> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Serializes all parameters (name order) plus any extra records.
pub fn store_records<S: Scalar>(store: &ParamStore<S>) -> Records {
    store.iter().map(|p| (p.name.clone(), p.value.cast())).collect()
}

/// Loads matching records into `store`. Every parameter whose name starts
/// with `prefix` must be present with the same shape.
pub fn apply_records<S: Scalar>(
    store: &mut ParamStore<S>,
    records: &[(String, Tensor<f32>)],
    prefix: &str,
    path: &Path,
) -> Result<()> {
    for p in store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        let (_, t) = records
            .iter()
            .find(|(n, _)| *n == p.name)
            .ok_or_else(|| Error::format(path, format!("missing record {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::format(
                path,
                format!("record {} has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape()),
            ));
        }
        p.value = t.cast();
    }
    Ok(())
}

//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "NATSCKPT"
//! version    u32      currently 1
//! seed       u64
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata
//! count      u32      number of entries
//! entry*     name_len u32, name bytes, ndim u32, ndim × u64 dims,
//!            product(dims) × f32 values
//! ```
//!
//! Entries appear in parameter order, so equal parameter sets always
//! serialize to identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NATSCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// A parameter set plus free-form metadata (the model layer stores its
/// architecture record here).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub metadata: String,
}

pub fn encode(params: &ParameterSet, metadata: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.scalar_count() * 4 + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.seed().to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = c.u64()?;
    let metadata = c.string()?;
    let count = c.u32()?;
    let mut params = ParameterSet::new(seed);
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("oversized tensor".into()))?,
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, values)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { params, metadata })
}

pub fn save(path: &Path, params: &ParameterSet, metadata: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params, metadata))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

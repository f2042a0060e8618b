//! Flat parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "TSAGCKPT"
//! format version   u32
//! engine version   u32 length + UTF-8 bytes
//! rng seed         u64
//! entry count      u64
//! entry*           u32 name length + UTF-8 name, u32 ndim, ndim × u64 extents,
//!                  product(extents) × f64 payload
//! ```

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TSAGCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub engine_version: String,
    pub seed: u64,
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, store: &ParamStore<T>, header: &CheckpointHeader) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.engine_version.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.engine_version.as_bytes());
    buf.extend_from_slice(&header.seed.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TensorError::Checkpoint("truncated archive".into()))?;
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
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| TensorError::Checkpoint(e.to_string()))
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(io_err)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported format version {version}")));
    }
    let header = CheckpointHeader { engine_version: c.string()?, seed: c.u64()? };
    let count = c.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n.checked_mul(8).ok_or_else(|| TensorError::Checkpoint("payload overflow".into()))?)?
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        if store.id(&name).is_some() {
            return Err(TensorError::Checkpoint(format!("duplicate entry {name}")));
        }
        store.register(name, Tensor::new(&shape, data)?);
    }
    if c.pos != buf.len() {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok((header, store))
}

//! Binary weight blobs: `CTSFW001`, entry count, then per entry the name,
//! rank, dimensions and little-endian `f32` values.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CTSFW001";

pub fn encode_weights(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated weight blob".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad weight blob magic".into()));
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::from_vec(&shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after weight entries".into()));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from `entries`, which must match
/// names, order and shapes exactly.
pub fn load_into(store: &mut ParamStore<f32>, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!("blob has {} tensors, model expects {}", entries.len(), store.len())));
    }
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
    for ((id, name, shape), (ename, value)) in ids.into_iter().zip(entries) {
        if name != ename || shape != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {ename} {:?} does not match model tensor {name} {shape:?}",
                value.shape()
            )));
        }
        *store.get_mut(id) = value;
    }
    Ok(())
}

pub fn save_weights(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(store)).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

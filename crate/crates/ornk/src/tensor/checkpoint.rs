//! Checkpoint container: magic, version, a UTF-8 metadata sidecar (JSON
//! by convention, opaque here), then named parameter records with raw
//! little-endian f64 payloads. Round-trips are bit-exact. The parser
//! must survive arbitrary bytes: every length is validated against the
//! remaining input before any allocation.

use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ORNK";
pub const CHECKPOINT_VERSION: u32 = 1;

const FMT: &str = "checkpoint";
const MAX_RANK: u32 = 16;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::parse(
                FMT,
                format!("truncated while reading {what}: need {n} bytes, have {}", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::parse(FMT, format!("{what} is not valid UTF-8")))
    }
}

/// Serializes named tensors plus a metadata string. Record order is the
/// argument order, so identical inputs give identical bytes.
pub fn serialize_checkpoint(params: &[(String, Tensor)], meta: &str) -> Result<Vec<u8>> {
    for (name, t) in params {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("checkpoint parameter {name}")));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Inverse of `serialize_checkpoint`. Rejects bad magic, unknown
/// versions, non-finite values, duplicate names and trailing bytes.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(FMT, format!("bad magic {magic:02x?}")));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(FMT, format!("unsupported version {version}")));
    }
    let meta_len = c.u32("metadata length")? as usize;
    let meta = c.string(meta_len, "metadata")?;
    let count = c.u64("parameter count")?;
    // Every record takes at least name_len + rank = 8 bytes.
    if count > (c.remaining() / 8) as u64 {
        return Err(Error::parse(
            FMT,
            format!("parameter count {count} impossible for {} remaining bytes", c.remaining()),
        ));
    }
    let mut params: Vec<(String, Tensor)> = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = c.string(name_len, "parameter name")?;
        if params.iter().any(|(n, _)| *n == name) {
            return Err(Error::parse(FMT, format!("duplicate parameter name {name:?}")));
        }
        let rank = c.u32("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::parse(FMT, format!("parameter {i}: rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = c.u64("extent")?;
            if e == 0 {
                return Err(Error::parse(FMT, format!("parameter {name:?} has a zero extent")));
            }
            let e = usize::try_from(e)
                .map_err(|_| Error::parse(FMT, format!("extent {e} overflows")))?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::parse(FMT, format!("parameter {name:?} size overflows")))?;
            shape.push(e);
        }
        if numel > c.remaining() / 8 {
            return Err(Error::parse(
                FMT,
                format!("parameter {name:?} claims {numel} values, only {} bytes left", c.remaining()),
            ));
        }
        let raw = c.take(numel * 8, "values")?;
        let mut data = Vec::with_capacity(numel);
        for ch in raw.chunks_exact(8) {
            let v = f64::from_le_bytes(ch.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(Error::parse(FMT, format!("non-finite value in {name:?}")));
            }
            data.push(v);
        }
        params.push((name, Tensor::new(shape, data)?));
    }
    if c.remaining() != 0 {
        return Err(Error::parse(FMT, format!("{} trailing bytes", c.remaining())));
    }
    Ok((meta, params))
}

pub fn save_checkpoint_file(
    path: impl AsRef<Path>,
    params: &[(String, Tensor)],
    meta: &str,
) -> Result<()> {
    let bytes = serialize_checkpoint(params, meta)?;
    std::fs::write(path.as_ref(), bytes)
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

pub fn load_checkpoint_file(path: impl AsRef<Path>) -> Result<(String, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    parse_checkpoint(&bytes)
}

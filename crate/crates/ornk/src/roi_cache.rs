//! On-disk cache of fused region-of-interest channels. One file per
//! sample id, holding the sample's predicted rank, the producing bank's
//! weight digest, the fusion variant, and the h*h grid. Loads reject
//! entries written by a different bank or variant, so a retrained bank
//! can never silently feed stale channels into final training.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::cam::{RoiMap, RoiVariant};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"ORIC";
const VERSION: u8 = 1;
const MAX_ID_LEN: usize = 4096;
const MAX_SIDE: usize = 4096;

/// One cached entry, exactly as stored.
#[derive(Debug, Clone)]
pub struct RoiEntry {
    pub id: String,
    pub predicted: usize,
    pub variant: RoiVariant,
    pub bank_hash: [u8; 32],
    pub values: Tensor,
}

pub fn serialize_roi(entry: &RoiEntry) -> Result<Vec<u8>> {
    let &[h, w] = entry.values.shape() else {
        return Err(Error::Shape(format!("expected [H,W] grid, got {:?}", entry.values.shape())));
    };
    if h != w || h == 0 || h > MAX_SIDE {
        return Err(Error::Shape(format!("grid must be square and at most {MAX_SIDE}, got {h}x{w}")));
    }
    if entry.id.is_empty() || entry.id.len() > MAX_ID_LEN {
        return Err(Error::Config(format!("bad id length {}", entry.id.len())));
    }
    if entry.predicted > u8::MAX as usize {
        return Err(Error::Config(format!("predicted rank {} does not fit", entry.predicted)));
    }
    let mut out = Vec::with_capacity(4 + 1 + 2 + entry.id.len() + 4 + 1 + 1 + 32 + h * h * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(entry.id.len() as u16).to_le_bytes());
    out.extend_from_slice(entry.id.as_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.push(entry.predicted as u8);
    out.push(entry.variant.code());
    out.extend_from_slice(&entry.bank_hash);
    for v in entry.values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                "roi cache",
                format!("truncated: wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Parses one cache entry. Validates everything: magic, version, exact
/// length, UTF-8 id, variant code, and finiteness of every grid value.
pub fn parse_roi(bytes: &[u8]) -> Result<RoiEntry> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::parse("roi cache", "bad magic"));
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(Error::parse("roi cache", format!("unsupported version {version}")));
    }
    let id_len = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes")) as usize;
    if id_len == 0 || id_len > MAX_ID_LEN {
        return Err(Error::parse("roi cache", format!("bad id length {id_len}")));
    }
    let id = std::str::from_utf8(cur.take(id_len)?)
        .map_err(|_| Error::parse("roi cache", "id is not UTF-8"))?
        .to_string();
    let h = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
    if h == 0 || h > MAX_SIDE {
        return Err(Error::parse("roi cache", format!("bad grid side {h}")));
    }
    let predicted = cur.take(1)?[0] as usize;
    let variant = RoiVariant::from_code(cur.take(1)?[0])
        .map_err(|_| Error::parse("roi cache", "unknown variant code"))?;
    let bank_hash: [u8; 32] = cur.take(32)?.try_into().expect("32 bytes");
    let body = cur.take(h * h * 8)?;
    if cur.pos != bytes.len() {
        return Err(Error::parse(
            "roi cache",
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    let mut values = Vec::with_capacity(h * h);
    for chunk in body.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::parse("roi cache", "non-finite grid value"));
        }
        values.push(v);
    }
    Ok(RoiEntry {
        id,
        predicted,
        variant,
        bank_hash,
        values: Tensor::new(vec![h, h], values)?,
    })
}

/// Directory of entries keyed by sample id, bound to one bank and one
/// fusion variant.
#[derive(Debug, Clone)]
pub struct RoiCache {
    dir: PathBuf,
    bank_hash: [u8; 32],
    variant: RoiVariant,
}

fn file_name(id: &str) -> String {
    let digest = Sha256::digest(id.as_bytes());
    let mut name = String::with_capacity(36);
    for b in &digest[..16] {
        name.push_str(&format!("{b:02x}"));
    }
    name.push_str(".roi");
    name
}

impl RoiCache {
    pub fn open(
        dir: impl AsRef<Path>,
        bank_hash: [u8; 32],
        variant: RoiVariant,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(RoiCache { dir, bank_hash, variant })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn variant(&self) -> RoiVariant {
        self.variant
    }

    fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(file_name(id))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.path_for(id).exists()
    }

    pub fn store(&self, id: &str, roi: &RoiMap) -> Result<()> {
        let entry = RoiEntry {
            id: id.to_string(),
            predicted: roi.predicted,
            variant: self.variant,
            bank_hash: self.bank_hash,
            values: roi.values.clone(),
        };
        let bytes = serialize_roi(&entry)?;
        let path = self.path_for(id);
        std::fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(&self, id: &str) -> Result<RoiEntry> {
        let path = self.path_for(id);
        let bytes = std::fs::read(&path).map_err(|_| {
            Error::Missing(format!("no cached region map for sample {id:?} in {}", self.dir.display()))
        })?;
        let entry = parse_roi(&bytes)?;
        if entry.id != id {
            return Err(Error::parse(
                "roi cache",
                format!("{} holds sample {:?}, not {id:?}", path.display(), entry.id),
            ));
        }
        if entry.bank_hash != self.bank_hash {
            return Err(Error::parse(
                "roi cache",
                format!("entry for {id:?} was produced by a different bank; re-extract the cache"),
            ));
        }
        if entry.variant != self.variant {
            return Err(Error::parse(
                "roi cache",
                format!(
                    "entry for {id:?} holds the {} variant, cache expects {}",
                    entry.variant.label(),
                    self.variant.label()
                ),
            ));
        }
        Ok(entry)
    }

    /// Errors with the full list of ids that have no entry.
    pub fn verify_complete<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: Vec<&str> = ids.into_iter().filter(|id| !self.contains(id)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Missing(format!(
                "{} samples have no cached region map: {}",
                missing.len(),
                missing.join(", ")
            )))
        }
    }
}

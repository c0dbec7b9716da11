//! Binary checkpoint container for named f64 tensors.
//!
//! Layout (all integers little-endian):
//!   magic "PDIF" | version u32 | count u32 |
//!   per tensor: name_len u32, name bytes, rank u32, dims u64 * rank,
//!               values f64 * prod(dims) |
//!   checksum u64 (FNV-1a over every preceding byte)
//!
//! Loads verify magic, version, and checksum; a flipped byte anywhere is
//! rejected. Saves go through a temp file and rename, so readers never see a
//! half-written checkpoint.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PDIF";
pub const VERSION: u32 = 1;

/// FNV-1a, 64-bit.
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

pub fn encode(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = Fnv64::new();
    h.write(&buf);
    buf.extend_from_slice(&h.finish().to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint {
                detail: format!("truncated while reading {what}"),
                offset: Some(self.pos as u64),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if buf.len() < MAGIC.len() + 4 + 4 + 8 {
        return Err(Error::Checkpoint { detail: "file too short".into(), offset: Some(buf.len() as u64) });
    }
    let body_len = buf.len() - 8;
    let mut h = Fnv64::new();
    h.write(&buf[..body_len]);
    let want = u64::from_le_bytes(buf[body_len..].try_into().unwrap());
    let got = h.finish();
    if want != got {
        return Err(Error::Checkpoint {
            detail: format!("checksum mismatch: stored {want:#018x}, computed {got:#018x}"),
            offset: Some(body_len as u64),
        });
    }

    let mut r = Reader { buf: &buf[..body_len], pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint { detail: format!("bad magic {magic:?}"), offset: Some(0) });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            detail: format!("unsupported version {version} (expected {VERSION})"),
            offset: Some(4),
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_pos = r.pos;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| {
            Error::Checkpoint { detail: "tensor name is not utf-8".into(), offset: Some(name_pos as u64) }
        })?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let raw = r.take(n * 8, "values")?;
        for c in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(c.try_into().unwrap()));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body_len {
        return Err(Error::Checkpoint {
            detail: format!("{} trailing bytes after last tensor", body_len - r.pos),
            offset: Some(r.pos as u64),
        });
    }
    Ok(out)
}

/// Atomic write: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    atomic_write(path, &encode(tensors))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::Checkpoint {
        detail: format!("cannot read {}: {e}", path.display()),
        offset: None,
    })?;
    decode(&buf)
}

/// Lookup helper for loaders that expect a fixed set of names.
pub fn find<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint { detail: format!("missing tensor {name:?}"), offset: None })
}

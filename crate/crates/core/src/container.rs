//! Binary container of named `f32` arrays with a text metadata block.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FSNA" | u32 version | u64 meta_len | meta (UTF-8)
//! u64 count | count × (u32 name_len | name | u32 ndim | ndim × u64 dim | numel × f32)
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::NamedArray;

pub const MAGIC: &[u8; 4] = b"FSNA";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: String,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.arrays.iter().map(|a| 16 + a.name.len() + 8 * a.shape.len() + 4 * a.data.len()).sum();
        let mut out = Vec::with_capacity(64 + self.meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if &body[..4] != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported version {version}")));
        }
        let meta_len = r.len_u64()?;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| Error::Integrity("metadata is not UTF-8".into()))?;
        let count = r.len_u64()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Integrity("array name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            if ndim > 16 {
                return Err(Error::Integrity(format!("`{name}` claims {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<usize>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Integrity(format!("`{name}` size overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Container { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Integrity(format!("length prefix {n} at offset {} runs past the end ({} bytes)", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Integrity(format!("length {v} does not fit in memory")))
    }
}

//! Weight checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "AMAQCKPT"
//! version  u32      1
//! digest   32 bytes SHA-256 of the model config
//! count    u32      number of arrays
//! count times:
//!   name_len u32, name (UTF-8), ndim u32, dims (u32 each), data (f32 each)
//! ```

use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"AMAQCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub arrays: Vec<(String, Tensor)>,
}

/// Parses a 64-character hex digest.
pub(crate) fn digest_bytes(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 {
        return Err(Error::Invalid(format!(
            "digest must be 64 hex characters, got {}",
            hex.len()
        )));
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Invalid(format!("bad hex digest {hex}")))?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Framing(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Collects every parameter of `stores` under its own name.
    pub fn from_stores(digest_hex: &str, stores: &[&ParamStore]) -> Result<Self> {
        let arrays = stores
            .iter()
            .flat_map(|s| s.iter().map(|(_, p)| (p.name.clone(), p.value.clone())))
            .collect();
        Ok(Checkpoint {
            digest: digest_bytes(digest_hex)?,
            arrays,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Integrity("not a checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Integrity("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let bytes = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Framing("array too large".into()))?,
            )?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Framing(format!(
                "{} trailing bytes in checkpoint",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint { digest, arrays })
    }

    /// Copies matching arrays into `store`; returns how many were applied.
    pub fn apply(&self, store: &mut ParamStore) -> Result<usize> {
        let mut applied = 0;
        for (name, t) in &self.arrays {
            if let Some(id) = store.find(name) {
                let p = store.get_mut(id);
                if p.value.shape() != t.shape() {
                    return Err(Error::shape("checkpoint", p.value.shape(), t.shape()));
                }
                p.value = t.clone();
                applied += 1;
            }
        }
        Ok(applied)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

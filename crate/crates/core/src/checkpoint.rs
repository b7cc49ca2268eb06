//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "I2ICKPT\0"
//! version      u32      1
//! digest_len   u32      then that many UTF-8 bytes (backbone config digest)
//! block_count  u64
//! per block:
//!   name_len   u32      then that many UTF-8 bytes
//!   ndim       u32      then ndim × u64 dimensions
//!   data       numel × f64
//! checksum     32 bytes SHA-256 of everything above
//! ```
//!
//! Blocks are written in the order given, so identical inputs give identical
//! bytes.

use std::collections::HashSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::sha256_hex;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"I2ICKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    pub blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config_digest: impl Into<String>) -> Self {
        Checkpoint {
            config_digest: config_digest.into(),
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.blocks.push((name.into(), t));
    }

    /// Adds every tensor of `set` under `prefix`.
    pub fn push_set<P: ParamSet + ?Sized>(&mut self, prefix: &str, set: &P) {
        let mut named = Vec::new();
        set.visit(prefix, &mut named);
        for (name, t) in named {
            self.blocks.push((name, t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no block {name:?}")))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.blocks.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Loads the tensors named `prefix + name` into `set`, checking shapes.
    pub fn load_set<P: ParamSet + ?Sized>(&self, prefix: &str, set: &mut P) -> Result<()> {
        let names: Vec<String> = {
            let mut named = Vec::new();
            set.visit(prefix, &mut named);
            named.into_iter().map(|(n, _)| n).collect()
        };
        for (name, slot) in names.iter().zip(set.tensors_mut()) {
            let t = self.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "block {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_digest.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_digest.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u64).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config_digest = r.string()?;
        let count = r.u64()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name = r.string()?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate block {name:?}")));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("block {name:?} is too large")))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Format("block too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("block {name:?}: {e}")))?;
            blocks.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the last block".into()));
        }
        Ok(Checkpoint {
            config_digest,
            blocks,
        })
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialised bytes.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("block name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut c = Checkpoint::new("abc");
        c.push(
            "a",
            Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
        );
        c.push("b", Tensor::scalar(7.25));
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config_digest, "abc");
        assert!(back.get("a").unwrap().bit_eq(c.get("a").unwrap()));
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut c = Checkpoint::new("x");
        c.push("a", Tensor::scalar(1.0));
        let mut bytes = c.to_bytes();
        bytes[30] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}

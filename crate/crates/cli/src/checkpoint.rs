//! Binary weight files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "HODICKPT" version
//! config_len config_toml
//! count { name_len name dims[4] f32[numel] }*count
//! sha256 of every preceding byte
//! ```
//!
//! Every tensor of the parameter store is written in store order, running
//! statistics included. Values are stored as `f32`.

use std::path::Path;

use hodinet_core::{Error, ParamStore};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"HODICKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("file ends at byte {0} in the middle of a record")]
    Truncated(usize),
    #[error("checksum mismatch; the file is corrupt")]
    ChecksumMismatch,
    #[error("{0} trailing bytes before the checksum")]
    TrailingBytes(usize),
    #[error("invalid UTF-8 in {what} at byte {offset}")]
    BadText { what: &'static str, offset: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Configuration the weights were produced with, as TOML.
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(config: String, store: &ParamStore) -> Self {
        let tensors = store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.tensor.shape().0,
                data: e.tensor.data().iter().map(|v| *v as f32).collect(),
            })
            .collect();
        Checkpoint { config, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION as usize);
        put(&mut out, self.config.len());
        out.extend_from_slice(self.config.as_bytes());
        put(&mut out, self.tensors.len());
        for t in &self.tensors {
            put(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            for d in t.shape {
                put(&mut out, d);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        if bytes.len() < r.pos + DIGEST_LEN {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let body_len = bytes.len() - DIGEST_LEN;
        if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let r = &mut Reader {
            bytes: &bytes[..body_len],
            pos: r.pos,
        };
        let config = r.text("configuration")?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.text("tensor name")?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body_len {
            return Err(CheckpointError::TrailingBytes(body_len - r.pos));
        }
        Ok(Checkpoint { config, tensors })
    }

    /// Copies the weights into `store`. Fails without modifying anything
    /// when names or shapes do not line up, listing every offending name.
    pub fn apply(&self, store: &mut ParamStore) -> hodinet_core::Result<()> {
        let mut problems = Vec::new();
        let mut ids = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            match store.find(&t.name) {
                None => problems.push(format!("unexpected tensor {}", t.name)),
                Some(id) if store.get(id).shape().0 != t.shape => problems.push(format!(
                    "{} has shape {:?} in the checkpoint but {:?} in the model",
                    t.name,
                    t.shape,
                    store.get(id).shape().0
                )),
                Some(id) => ids.push(id),
            }
        }
        for e in store.entries() {
            if !self.tensors.iter().any(|t| t.name == e.name) {
                problems.push(format!("missing tensor {}", e.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint does not fit the model: {}",
                problems.join("; ")
            )));
        }
        for (t, id) in self.tensors.iter().zip(ids) {
            let v: Vec<f64> = t.data.iter().map(|x| *x as f64).collect();
            store.assign(id, &v)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| CliError::Checkpoint {
            path: path.to_owned(),
            source,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn text(&mut self, what: &'static str) -> std::result::Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let offset = self.pos;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::BadText { what, offset })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hodinet_core::nn::ParamKind;
    use hodinet_core::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn([2, 1, 1, 3], |_, _, _, w| w as f64 * 0.5), ParamKind::Trainable);
        s.add("a.running_var", Tensor::full([1, 2, 1, 1], 1.25), ParamKind::Buffer);
        s
    }

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint::from_store("seed = 1\n".into(), &store());
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::from_store(String::new(), &store()).to_bytes();
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert_eq!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::ChecksumMismatch));
        assert_eq!(Checkpoint::from_bytes(&bytes[..10]), Err(CheckpointError::Truncated(10)));
        assert_eq!(Checkpoint::from_bytes(b"NOTACKPT"), Err(CheckpointError::BadMagic));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert_eq!(Checkpoint::from_bytes(&v2), Err(CheckpointError::UnsupportedVersion(2)));
    }

    #[test]
    fn apply_copies_values_and_lists_mismatches() {
        let src = store();
        let ck = Checkpoint::from_store(String::new(), &src);
        let mut dst = ParamStore::new();
        dst.add("a.weight", Tensor::zeros([2, 1, 1, 3]), ParamKind::Trainable);
        dst.add("a.running_var", Tensor::zeros([1, 2, 1, 1]), ParamKind::Buffer);
        ck.apply(&mut dst).unwrap();
        assert_eq!(dst.named("a.running_var").data(), &[1.25, 1.25]);

        let mut bad = ParamStore::new();
        bad.add("a.weight", Tensor::zeros([2, 1, 1, 4]), ParamKind::Trainable);
        bad.add("b.bias", Tensor::zeros([1, 1, 1, 1]), ParamKind::Trainable);
        let msg = ck.apply(&mut bad).unwrap_err().to_string();
        for name in ["a.weight", "a.running_var", "b.bias"] {
            assert!(msg.contains(name), "{msg}");
        }
        assert!(bad.named("a.weight").data().iter().all(|v| *v == 0.0));
    }
}

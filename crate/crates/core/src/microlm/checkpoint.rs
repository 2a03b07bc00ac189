//! Binary container for named f64 tensors plus a JSON configuration.
//!
//! Layout (little endian): magic `STCK`, version byte, 32-byte SHA-256 of
//! the configuration JSON, u32 JSON length and bytes, u32 tensor count, then
//! per tensor: u16 name length, name bytes, u8 rank, u32 per dimension, and
//! the f64 payload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("configuration hash mismatch")]
    HashMismatch,
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: expected {expected} values, found {found}")]
    TensorSize {
        name: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: BTreeMap<String, NamedTensor>,
}

impl Checkpoint {
    pub fn new(config_json: impl Into<String>) -> Self {
        Self {
            config_json: config_json.into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors
            .insert(name.into(), NamedTensor { shape, data });
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    /// Copies a stored tensor into `dst`, which must have the same length.
    pub fn copy_into(&self, name: &str, dst: &mut [f64]) -> Result<(), CheckpointError> {
        let t = self.get(name)?;
        if t.data.len() != dst.len() {
            return Err(CheckpointError::TensorSize {
                name: name.to_string(),
                expected: dst.len(),
                found: t.data.len(),
            });
        }
        dst.copy_from_slice(&t.data);
        Ok(())
    }

    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.config_json.as_bytes()).into()
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.config_hash());
        let cfg = self.config_json.as_bytes();
        out.extend_from_slice(&len_u32(cfg.len(), "config")?.to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            let numel: usize = t.shape.iter().product();
            if numel != t.data.len() {
                return Err(CheckpointError::TensorSize {
                    name: name.clone(),
                    expected: numel,
                    found: t.data.len(),
                });
            }
            let name_len = u16::try_from(name.len())
                .map_err(|_| CheckpointError::Invalid("tensor name too long".into()))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| CheckpointError::Invalid("tensor rank too large".into()))?;
            out.push(rank);
            for &d in &t.shape {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.take(1, "version")?[0];
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hash: [u8; 32] = r.take(32, "hash")?.try_into().expect("32 bytes");
        let cfg_len = r.u32("config length")? as usize;
        let config_json = String::from_utf8(r.take(cfg_len, "config")?.to_vec())
            .map_err(|_| CheckpointError::Invalid("config is not UTF-8".into()))?;
        let mut ck = Checkpoint::new(config_json);
        if ck.config_hash() != hash {
            return Err(CheckpointError::HashMismatch);
        }
        let count = r.u32("tensor count")?;
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| CheckpointError::Invalid("tensor name is not UTF-8".into()))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Invalid(format!("tensor {name} too large")))?;
            let nbytes = numel
                .checked_mul(8)
                .ok_or_else(|| CheckpointError::Invalid(format!("tensor {name} too large")))?;
            let data = r
                .take(nbytes, "tensor data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.tensors.insert(name, NamedTensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(n).map_err(|_| CheckpointError::Invalid(format!("{what} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

//! Binary checkpoint container shared by the retriever, captioner and
//! optimizer state.
//!
//! Layout: magic bytes `RCKPT1`, then a u64 LE tensor count, then per tensor
//! `{name length (u64 LE), UTF-8 name, rank (u64 LE), dims (u64 LE each),
//! values (f64 LE each)}`. Round-trips are byte-exact.

use crate::graphgrad::Tensor;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 6] = b"RCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("tensor {name} has non-finite values")]
    NonFinite { name: String },
    #[error("tensor {name} has invalid dims {dims:?}")]
    BadDims { name: String, dims: Vec<u64> },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<(), CheckpointError> {
        if self.index.contains_key(name) {
            return Err(CheckpointError::DuplicateName(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Fetch a tensor and insist on its shape.
    pub fn require_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor, CheckpointError> {
        let t = self.require(name)?;
        if t.shape() != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 6];
        cursor.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let count = read_u64(&mut cursor)?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = read_u64(&mut cursor)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            cursor.read_exact(&mut name_bytes).map_err(|_| CheckpointError::Truncated)?;
            let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
            let rank = read_u64(&mut cursor)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(&mut cursor)?);
            }
            if dims.iter().any(|&d| d == 0) || dims.is_empty() {
                return Err(CheckpointError::BadDims { name, dims });
            }
            let len: u64 = dims.iter().product();
            let mut values = Vec::with_capacity(len as usize);
            for _ in 0..len {
                let mut buf = [0u8; 8];
                cursor.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
                values.push(f64::from_le_bytes(buf));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite { name });
            }
            let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
            let tensor = Tensor::new(shape, values)
                .map_err(|_| CheckpointError::BadDims { name: name.clone(), dims })?;
            ckpt.push(&name, tensor)?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes();
        let mut file = std::fs::File::create(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        file.write_all(&bytes).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn read_u64(cursor: &mut std::io::Cursor<&[u8]>) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    cursor.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
    Ok(u64::from_le_bytes(buf))
}

/// Store a short ASCII string (e.g. a config fingerprint) as one f64 per byte.
pub fn string_tensor(s: &str) -> Tensor {
    let values: Vec<f64> = s.bytes().map(|b| b as f64).collect();
    Tensor::vector(values).expect("non-empty ascii string")
}

pub fn tensor_string(t: &Tensor) -> Option<String> {
    let bytes: Option<Vec<u8>> = t
        .values()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..128.0).contains(&v) {
                Some(v as u8)
            } else {
                None
            }
        })
        .collect();
    bytes.and_then(|b| String::from_utf8(b).ok())
}

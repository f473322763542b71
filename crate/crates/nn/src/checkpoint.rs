//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"STSCKPT\0"          8-byte magic
//! u32                   format version (currently 1)
//! u64                   manifest length in bytes
//! [u8; manifest_len]    JSON manifest: kind, free-form meta, tensor table
//! f64 * total           tensor payloads, in manifest order
//! ```
//!
//! Each tensor-table entry records name, shape, dtype (`"f64"`), and the
//! element offset/length into the payload. Values are stored at full
//! precision so a save/load cycle is lossless.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::Tensor;

pub const MAGIC: &[u8; 8] = b"STSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("payload truncated or inconsistent with manifest")]
    Truncated,
    #[error("checkpoint kind {found:?} where {expected:?} was expected")]
    WrongKind { expected: String, found: String },
    #[error("tensor {0:?} missing from checkpoint")]
    Missing(String),
    #[error("tensor {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: a kind tag, JSON metadata and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Appends every parameter of `store` whose name starts with `prefix`.
    pub fn push_store(&mut self, store: &ParamStore, prefix: &str) {
        for (_, name, t) in store.iter() {
            if name.starts_with(prefix) {
                self.tensors.push((name.to_string(), t.clone()));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into every `store` parameter with the given
    /// prefix. Every such parameter must be present with a matching shape.
    pub fn load_into(&self, store: &mut ParamStore, prefix: &str) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            if !name.starts_with(prefix) {
                continue;
            }
            let t = self.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let expected = store.get(id).shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::WrongKind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                len: t.len() as u64,
            });
            offset += t.len() as u64;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + mjson.len() + 8 * offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&mjson);
        for (_, t) in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| CheckpointError::Truncated)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| CheckpointError::Truncated)?;
        let mlen = u64::from_le_bytes(b8) as usize;
        if r.len() < mlen {
            return Err(CheckpointError::Truncated);
        }
        let manifest: Manifest = serde_json::from_slice(&r[..mlen])?;
        let payload = &r[mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f64" || e.shape.iter().product::<usize>() as u64 != e.len {
                return Err(CheckpointError::Truncated);
            }
            let start = (e.offset as usize).checked_mul(8).ok_or(CheckpointError::Truncated)?;
            let end = start + 8 * e.len as usize;
            if end > payload.len() {
                return Err(CheckpointError::Truncated);
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|_| CheckpointError::Truncated)?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn round_trip_is_lossless() {
        let mut c = Checkpoint::new("test", serde_json::json!({"step": 3}));
        c.push("a", arr2(&[[1.0, f64::MIN_POSITIVE], [-0.1, 1e300]]).into_dyn());
        c.push("scalar", ArrayD::from_elem(IxDyn(&[]), std::f64::consts::PI));
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_garbage_and_future_versions() {
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
        let mut bytes = Checkpoint::new("x", serde_json::Value::Null).to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn load_into_checks_shapes() {
        let mut store = ParamStore::new();
        store.add("m.w", ArrayD::zeros(IxDyn(&[2, 2])));
        let mut c = Checkpoint::new("m", serde_json::Value::Null);
        c.push("m.w", ArrayD::zeros(IxDyn(&[3])));
        assert!(matches!(
            c.load_into(&mut store, "m."),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}

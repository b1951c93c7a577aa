//! Versioned binary container used by tokenizer files and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TSRC" | u32 format version | u32 kind len | kind | u64 header len | header JSON
//!        | f32 tensor payload, in header order | sha256 of every preceding byte
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TSRC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("expected a {expected} container, found {found}")]
    Kind { expected: String, found: String },
    #[error("content hash mismatch: file is corrupt or was modified")]
    HashMismatch,
    #[error("truncated container")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(TensorEntry, Vec<f32>)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((TensorEntry { name: name.into(), shape }, data));
    }

    pub fn tensor(&self, name: &str) -> Result<&(TensorEntry, Vec<f32>), ContainerError> {
        self.tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header { meta: self.meta.clone(), tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect() };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_kind: &str) -> Result<Self, ContainerError> {
        if bytes.len() < 4 + 4 + 4 + 8 + 32 {
            return Err(ContainerError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if &body[..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(ContainerError::HashMismatch);
        }
        let mut cur = Cursor { buf: body, pos: 4 };
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ContainerError::Version(version));
        }
        let kind_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let kind = String::from_utf8(cur.take(kind_len)?.to_vec()).map_err(|e| ContainerError::Header(e.to_string()))?;
        if kind != expected_kind {
            return Err(ContainerError::Kind { expected: expected_kind.to_string(), found: kind });
        }
        let header_len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let header: Header =
            serde_json::from_slice(cur.take(header_len)?).map_err(|e| ContainerError::Header(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = cur.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((entry, data));
        }
        if cur.pos != body.len() {
            return Err(ContainerError::Header("trailing bytes after tensor payload".into()));
        }
        Ok(Self { kind, meta: header.meta, tensors })
    }

    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - 32..])
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| ContainerError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<Self, ContainerError> {
        let bytes =
            std::fs::read(path).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes, expected_kind)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated)?;
        if end > self.buf.len() {
            return Err(ContainerError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("checkpoint", serde_json::json!({"stage": "pretrain"}));
        c.push("w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5]);
        c.push("b", vec![1], vec![0.25]);
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes(), "checkpoint").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn tampering_is_detected() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Container::from_bytes(&bytes, "checkpoint"), Err(ContainerError::HashMismatch)));
    }

    #[test]
    fn wrong_kind_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(Container::from_bytes(&bytes, "tokenizer"), Err(ContainerError::Kind { .. })));
    }
}

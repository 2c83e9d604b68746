//! Versioned little-endian tensor blobs plus a JSON manifest mirroring the shape table.
//!
//! Layout: `b"GCRT"`, `u32` version, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u64` rows, `u64` cols; then every tensor's
//! values as `f64` in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dense::DenseMatrix;
use crate::error::{GcrError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"GCRT";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl TensorManifest {
    pub fn for_tensors(tensors: &[(String, DenseMatrix)], meta: serde_json::Value) -> Self {
        Self {
            format: "gcr-tensors".into(),
            version: TENSOR_VERSION,
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
            meta,
        }
    }
}

pub fn encode_tensors(tensors: &[(String, DenseMatrix)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    }
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(GcrError::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes_needed = n
            .checked_mul(8)
            .ok_or_else(|| GcrError::Format("payload size overflows".into()))?;
        let raw = self.take(bytes_needed)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(GcrError::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, DenseMatrix)>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TENSOR_MAGIC {
        return Err(GcrError::Format("bad magic, not a tensor blob".into()));
    }
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(GcrError::Format(format!(
            "tensor blob version {version}, expected {TENSOR_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| GcrError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        table.push((name, rows, cols));
    }
    let mut out = Vec::with_capacity(table.len());
    for (name, rows, cols) in table {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| GcrError::Format("tensor size overflows".into()))?;
        let data = r.f64s(n)?;
        out.push((name, DenseMatrix::from_vec(rows, cols, data)?));
    }
    r.finish()?;
    Ok(out)
}

/// Writes `path` (blob) and `path.json` (manifest).
pub fn save_tensors(path: &Path, tensors: &[(String, DenseMatrix)], meta: serde_json::Value) -> Result<()> {
    fs::write(path, encode_tensors(tensors))?;
    let manifest = TensorManifest::for_tensors(tensors, meta);
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, DenseMatrix)>> {
    decode_tensors(&fs::read(path)?)
}

pub fn load_manifest(path: &Path) -> Result<TensorManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?)
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

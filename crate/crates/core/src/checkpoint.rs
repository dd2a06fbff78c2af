//! Binary tensor container.
//!
//! Layout: `u64` little-endian header length, the JSON header, then every
//! tensor as little-endian `f64` values in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use numkit::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AlterError, Result};

pub const MAGIC: &str = "ALTR1";
pub const DTYPE: &str = "f64-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub section: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    dtype: String,
    seed: u64,
    config: Value,
    meta: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

/// Named tensors grouped into sections, plus JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    /// Echo of the configuration that produced the tensors.
    pub config: Value,
    pub meta: BTreeMap<String, Value>,
    pub entries: Vec<TensorEntry>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(seed: u64, config: Value) -> Self {
        Self {
            seed,
            config,
            ..Default::default()
        }
    }

    pub fn push(&mut self, section: &str, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(TensorEntry {
            name: name.into(),
            section: section.to_string(),
            shape: tensor.shape(),
        });
        self.tensors.push(tensor);
    }

    /// Tensors of `section` in stored order.
    pub fn section(&self, section: &str) -> Vec<(&str, &Tensor)> {
        self.entries
            .iter()
            .zip(&self.tensors)
            .filter(|(e, _)| e.section == section)
            .map(|(e, t)| (e.name.as_str(), t))
            .collect()
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.entries.iter().any(|e| e.section == section)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            magic: MAGIC.into(),
            dtype: DTYPE.into(),
            seed: self.seed,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self.entries.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(8 + json.len() + 8 * payload);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates the header before touching the payload.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |d: String| AlterError::format(path, d);
        if bytes.len() < 8 {
            return Err(bad("file shorter than the header length field".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[8..];
        if hlen > body.len() {
            return Err(bad(format!("header length {hlen} exceeds file size")));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.magic != MAGIC {
            return Err(bad(format!("magic {:?}, expected {MAGIC:?}", header.magic)));
        }
        if header.dtype != DTYPE {
            return Err(bad(format!("dtype {:?}, expected {DTYPE:?}", header.dtype)));
        }
        let counts: Vec<usize> = header
            .tensors
            .iter()
            .map(|e| e.shape[0].checked_mul(e.shape[1]))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("tensor shape overflows".into()))?;
        let expected: usize = counts.iter().sum::<usize>() * 8;
        let payload = &body[hlen..];
        if payload.len() != expected {
            return Err(bad(format!(
                "payload has {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        let mut tensors = Vec::with_capacity(counts.len());
        let mut off = 0;
        for (e, &n) in header.tensors.iter().zip(&counts) {
            let data: Vec<f64> = payload[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += 8 * n;
            tensors.push(Tensor::new(e.shape[0], e.shape[1], data)?);
        }
        Ok(Self {
            seed: header.seed,
            config: header.config,
            meta: header.meta,
            entries: header.tensors,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| AlterError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| AlterError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

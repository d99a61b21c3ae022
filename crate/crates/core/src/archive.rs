// SPDX-License-Identifier: MIT OR Apache-2.0

//! Safetensors-layout weight archive.
//!
//! Layout: 8-byte little-endian u64 header length, a UTF-8 JSON header
//! mapping tensor name to `{dtype, shape, data_offsets: [begin, end)}`
//! (plus an optional `__metadata__` string map), then the raw little-endian
//! tensor buffer. Offsets are relative to the start of the buffer.
//! F32 and F16 are accepted; F16 is upcast on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Decoded archive: every tensor upcast to f32.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Archive("file shorter than the 8-byte header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Archive(format!("header length {header_len} exceeds file")))?;
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..header_end])?;
        let buffer = &bytes[header_end..];

        let mut archive = Archive::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                archive.metadata = serde_json::from_value(value)?;
                continue;
            }
            let entry: Entry = serde_json::from_value(value)?;
            let [begin, end] = entry.data_offsets;
            if begin > end || end > buffer.len() {
                return Err(Error::Archive(format!(
                    "tensor `{name}` offsets [{begin}, {end}) outside buffer of {} bytes",
                    buffer.len()
                )));
            }
            let raw = &buffer[begin..end];
            let data = decode(&name, &entry.dtype, raw)?;
            let tensor = Tensor::new(entry.shape, data)
                .map_err(|e| Error::Archive(format!("tensor `{name}`: {e}")))?;
            archive.tensors.insert(name, tensor);
        }
        Ok(archive)
    }

    /// Serialize as F32. Tensors are laid out in name order; the header is
    /// padded with spaces to an 8-byte boundary.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), serde_json::to_value(&self.metadata)?);
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let size = t.len() * 4;
            let entry = Entry {
                dtype: "F32".into(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, offset + size],
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset += size;
        }
        let mut header_bytes = serde_json::to_vec(&header)?;
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

fn decode(name: &str, dtype: &str, raw: &[u8]) -> Result<Vec<f32>> {
    match dtype {
        "F32" => {
            if !raw.len().is_multiple_of(4) {
                return Err(Error::Archive(format!("tensor `{name}` byte length not a multiple of 4")));
            }
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        }
        "F16" => {
            if !raw.len().is_multiple_of(2) {
                return Err(Error::Archive(format!("tensor `{name}` byte length not a multiple of 2")));
            }
            Ok(raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect())
        }
        other => Err(Error::Dtype {
            name: name.to_string(),
            dtype: other.to_string(),
        }),
    }
}

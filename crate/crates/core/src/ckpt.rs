//! Checkpoint container shared by every stage.
//!
//! Layout: 8-byte magic `"P3CKPT1\0"`, a little-endian u32 header length, a
//! UTF-8 JSON header listing tensor names/shapes/dtypes/offsets, then the raw
//! little-endian `f32` payloads. Tensor names are namespaced per subsystem
//! (`encoder/...`, `prompt/text/...`, `rpn/...`, `detector/...`).

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"P3CKPT1\0";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorMeta>,
}

/// A named tensor bag. Values are held as f64 in memory and stored as f32.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("checkpoint tensor '{name}' missing")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Merge another checkpoint's tensors under this one (names must not collide).
    pub fn merge(&mut self, other: Checkpoint) -> Result<()> {
        for (name, value) in other.tensors {
            if self.tensors.contains_key(&name) {
                return Err(Error::Input(format!("duplicate tensor '{name}' on merge")));
            }
            self.tensors.insert(name, value);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut metas = Vec::with_capacity(self.tensors.len());
        let mut payload: Vec<u8> = Vec::new();
        for (name, value) in &self.tensors {
            metas.push(TensorMeta {
                name: name.clone(),
                shape: value.shape().to_vec(),
                dtype: "f32".into(),
                offset: payload.len(),
            });
            for v in value.iter() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header { tensors: metas })?;

        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(CKPT_MAGIC)?;
            f.write_all(&(header.len() as u32).to_le_bytes())?;
            f.write_all(&header)?;
            f.write_all(&payload)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let err = |m: &str| Error::Codec {
            path: path.display().to_string(),
            message: m.into(),
        };
        if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
            return Err(err("bad magic"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(err("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
        let payload = &bytes[12 + header_len..];

        let mut tensors = BTreeMap::new();
        for meta in header.tensors {
            if meta.dtype != "f32" {
                return Err(err(&format!("unsupported dtype {}", meta.dtype)));
            }
            let count: usize = meta.shape.iter().product();
            let end = meta.offset + count * 4;
            if end > payload.len() {
                return Err(err(&format!("tensor '{}' out of bounds", meta.name)));
            }
            let mut values = Vec::with_capacity(count);
            for chunk in payload[meta.offset..end].chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), values)
                .map_err(|e| err(&format!("tensor '{}': {e}", meta.name)))?;
            tensors.insert(meta.name, arr);
        }
        Ok(Self { tensors })
    }
}

//! On-disk codecs for the synthetic benchmark.
//!
//! Rasters are flat little-endian binaries with an 8-byte magic followed by
//! `H`, `W` as u32 — no image-codec dependency anywhere:
//!
//! * images: `"P3IMG1\0\0"` then `H*W*3` f32 values in row-major RGB order;
//! * masks:  `"P3MASK1\0"` then `H*W` u16 category indices (`0xFFFF` = background).
//!
//! Annotations are one JSON document per split.

use crate::error::{Error, Result};
use crate::geom::PixelBox;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const IMAGE_MAGIC: &[u8; 8] = b"P3IMG1\0\0";
pub const MASK_MAGIC: &[u8; 8] = b"P3MASK1\0";

/// Mask value for pixels not covered by any object.
pub const BACKGROUND: u16 = u16::MAX;

fn codec_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Codec {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn write_image(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(codec_err(path, format!("expected 3 channels, got {c}")));
    }
    let mut out = Vec::with_capacity(16 + h * w * 3 * 4);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in pixels.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &out)
}

pub fn read_image(path: &Path) -> Result<Array3<f32>> {
    let bytes = std::fs::read(path)?;
    let (h, w, payload) = parse_header(path, &bytes, IMAGE_MAGIC)?;
    let expected = h * w * 3 * 4;
    if payload.len() != expected {
        return Err(codec_err(
            path,
            format!("payload is {} bytes, expected {expected}", payload.len()),
        ));
    }
    let mut values = Vec::with_capacity(h * w * 3);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array3::from_shape_vec((h, w, 3), values)
        .map_err(|e| codec_err(path, format!("shape: {e}")))
}

pub fn write_mask(path: &Path, mask: &Array2<u16>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut out = Vec::with_capacity(16 + h * w * 2);
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in mask.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &out)
}

pub fn read_mask(path: &Path) -> Result<Array2<u16>> {
    let bytes = std::fs::read(path)?;
    let (h, w, payload) = parse_header(path, &bytes, MASK_MAGIC)?;
    let expected = h * w * 2;
    if payload.len() != expected {
        return Err(codec_err(
            path,
            format!("payload is {} bytes, expected {expected}", payload.len()),
        ));
    }
    let mut values = Vec::with_capacity(h * w);
    for chunk in payload.chunks_exact(2) {
        values.push(u16::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array2::from_shape_vec((h, w), values).map_err(|e| codec_err(path, format!("shape: {e}")))
}

fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 8]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 16 {
        return Err(codec_err(path, "file too short for header"));
    }
    if &bytes[..8] != magic {
        return Err(codec_err(path, "bad magic"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    Ok((h, w, &bytes[16..]))
}

/// Write via a temp file + rename so partially written artifacts never persist.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---- annotation JSON ------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub name: String,
    pub is_base: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u32,
    pub file: String,
    pub height: u32,
    pub width: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxEntry {
    pub image_id: u32,
    pub bbox: [u32; 4],
    pub category_index: usize,
}

impl BoxEntry {
    pub fn pixel_box(&self) -> PixelBox {
        PixelBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub categories: Vec<CategoryEntry>,
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<BoxEntry>,
}

impl AnnotationFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        atomic_write(path, &json)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        Ok(serde_json::from_slice(&buf)?)
    }
}

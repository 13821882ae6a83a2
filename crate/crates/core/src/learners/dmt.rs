//! Dense map tensor (`.dmt`) files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset 0   b"DMT1"
//! offset 4   u32 height
//! offset 8   u32 width
//! offset 12  u32 channels
//! offset 16  f32 payload, row-major, channel-minor (H x W x C)
//! ```
//!
//! The payload is exactly `4 * H * W * C` bytes and every value is finite.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::pool::ClassId;

pub const MAGIC: &[u8; 4] = b"DMT1";
const HEADER_LEN: usize = 16;

pub fn encode(tensor: ArrayView3<'_, f32>) -> Result<Vec<u8>> {
    let (h, w, c) = tensor.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * h * w * c);
    out.extend_from_slice(MAGIC);
    for dim in [h, w, c] {
        let dim = u32::try_from(dim).map_err(|_| Error::Data(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in tensor.iter() {
        if !v.is_finite() {
            return Err(Error::Data("dmt payload contains a non-finite value".into()));
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Array3<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Data("missing DMT1 header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(4), dim(8), dim(12));
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Data("dmt dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Data(format!(
            "dmt payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(h * w * c);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Data("dmt payload contains a non-finite value".into()));
        }
        data.push(v);
    }
    Ok(Array3::from_shape_vec((h, w, c), data).expect("length checked above"))
}

pub fn write(path: &Path, tensor: ArrayView3<'_, f32>) -> Result<()> {
    let bytes = encode(tensor)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Array3<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes a single-channel scalar map.
pub fn write_plane<T: Copy + Into<f64>>(path: &Path, plane: &Array2<T>) -> Result<()> {
    let (h, w) = plane.dim();
    let data: Vec<f32> = plane.iter().map(|&v| v.into() as f32).collect();
    let tensor = Array3::from_shape_vec((h, w, 1), data).unwrap();
    write(path, tensor.view())
}

pub fn read_plane(path: &Path) -> Result<Array2<f32>> {
    let t = read(path)?;
    let (h, w, c) = t.dim();
    if c != 1 {
        return Err(Error::Data(format!("{}: expected 1 channel, found {c}", path.display())));
    }
    Ok(t.into_shape_with_order((h, w)).unwrap())
}

/// Label maps are stored as class indices in one channel, `-1` for unlabeled.
pub fn write_labels(path: &Path, labels: &Array2<ClassId>) -> Result<()> {
    let plane = labels.mapv(|c| if c.is_labeled() { f64::from(c.0) } else { -1.0 });
    write_plane(path, &plane)
}

pub fn read_labels(path: &Path) -> Result<Array2<ClassId>> {
    let plane = read_plane(path)?;
    let mut out = Array2::from_elem(plane.dim(), ClassId::UNLABELED);
    for (dst, &v) in out.iter_mut().zip(plane.iter()) {
        if v < 0.0 {
            continue;
        }
        if v.fract() != 0.0 || v >= f32::from(u16::MAX) {
            return Err(Error::Data(format!("{}: invalid class value {v}", path.display())));
        }
        *dst = ClassId(v as u16);
    }
    Ok(out)
}

/// Masks are stored as 0/1 in one channel.
pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let plane = mask.mapv(|m| if m { 1.0f64 } else { 0.0 });
    write_plane(path, &plane)
}

pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    Ok(read_plane(path)?.mapv(|v| v > 0.5))
}

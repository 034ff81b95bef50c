//! `VPRF` local feature store.
//!
//! ```text
//! "VPRF" | version u32 = 1 | image_count u32 | d_loc u32 | holistic_dim u32 (0 = absent)
//! per image:
//!   id_length u16 | id bytes | feature_count u32
//!   feature_count × (x f32 | y f32 | d_loc × f32)
//!   holistic_dim × f32
//! ```

use std::path::Path;

use ndarray::Array2;

use super::{count_u32, read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Result, VprError};
use crate::model::{ImageFeatureSet, Position};

pub const MAGIC: &[u8; 4] = b"VPRF";
pub const VERSION: u32 = 1;

/// Serializes a store. Positions are validated after narrowing to `f32`, so
/// a value that would round up to 100 is rejected rather than silently
/// written out of range.
pub fn encode_store(sets: &[ImageFeatureSet]) -> Result<Vec<u8>> {
    // Empty sets still carry a descriptor length; prefer a non-empty one.
    let d_loc = sets
        .iter()
        .find(|s| !s.is_empty())
        .or(sets.first())
        .map_or(0, ImageFeatureSet::d_loc);
    let holistic_dim = sets
        .first()
        .and_then(|s| s.holistic())
        .map_or(0, <[f64]>::len);

    let mut w = ByteWriter::with_magic(MAGIC);
    w.u32(VERSION);
    w.u32(count_u32(sets.len(), "image count")?);
    w.u32(count_u32(d_loc, "d_loc")?);
    w.u32(count_u32(holistic_dim, "holistic dimension")?);

    for set in sets {
        if !set.is_empty() && set.d_loc() != d_loc {
            return Err(VprError::DimensionMismatch {
                expected: d_loc,
                found: set.d_loc(),
            });
        }
        let h_len = set.holistic().map_or(0, <[f64]>::len);
        if h_len != holistic_dim {
            return Err(VprError::Malformed(format!(
                "image {} has holistic length {h_len}, store has {holistic_dim}",
                set.id()
            )));
        }
        w.id(set.id())?;
        w.u32(count_u32(set.len(), "feature count")?);
        for (pos, desc) in set.positions().iter().zip(set.descriptors().rows()) {
            let narrowed = Position::new(pos.x as f32 as f64, pos.y as f32 as f64);
            narrowed.check()?;
            w.f32(pos.x);
            w.f32(pos.y);
            w.f32s(desc.iter());
        }
        if let Some(h) = set.holistic() {
            w.f32s(h);
        }
    }
    Ok(w.finish())
}

pub fn decode_store(bytes: &[u8]) -> Result<Vec<ImageFeatureSet>> {
    let mut r = ByteReader::new("VPRF", bytes);
    r.header(MAGIC, Some(VERSION))?;
    let count = r.u32()? as usize;
    let d_loc = r.u32()? as usize;
    let holistic_dim = r.u32()? as usize;

    let mut sets = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.id()?;
        let n = r.u32()? as usize;
        let stride = 2 + d_loc;
        let flat = r.f32s(n.saturating_mul(stride))?;
        let mut positions = Vec::with_capacity(n);
        let mut desc = Vec::with_capacity(n * d_loc);
        for row in flat.chunks_exact(stride.max(1)).take(n) {
            positions.push(Position::new(row[0], row[1]));
            desc.extend_from_slice(&row[2..]);
        }
        let descriptors = Array2::from_shape_vec((n, d_loc), desc).expect("row count times d_loc");
        let mut set = ImageFeatureSet::new(id, positions, descriptors)?;
        if holistic_dim > 0 {
            set.set_holistic(Some(r.f32s(holistic_dim)?));
        }
        sets.push(set);
    }
    r.finish()?;
    Ok(sets)
}

/// Writes a store to `path` and returns the number of bytes written.
pub fn write_store(sets: &[ImageFeatureSet], path: impl AsRef<Path>) -> Result<usize> {
    write_atomic(path, &encode_store(sets)?)
}

pub fn read_store(path: impl AsRef<Path>) -> Result<Vec<ImageFeatureSet>> {
    decode_store(&read_file(path)?)
}

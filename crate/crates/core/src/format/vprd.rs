//! `VPRD` dense feature map container, as exported by the extractor bridge.
//!
//! ```text
//! "VPRD" | version u32 = 1 | image_count u32
//! per image:
//!   id_length u16 | id bytes | H u32 | W u32 | C u32
//!   H·W·C × f32 tensor (row-major y, x, c) | H·W × f32 attention
//! ```

use std::path::Path;

use ndarray::{Array2, Array3};

use super::{count_u32, read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Result, VprError};
use crate::model::DenseFeatureMap;

pub const MAGIC: &[u8; 4] = b"VPRD";
pub const VERSION: u32 = 1;

pub fn encode_dense(maps: &[DenseFeatureMap]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::with_magic(MAGIC);
    w.u32(VERSION);
    w.u32(count_u32(maps.len(), "image count")?);
    for m in maps {
        w.id(&m.id)?;
        w.u32(count_u32(m.height(), "height")?);
        w.u32(count_u32(m.width(), "width")?);
        w.u32(count_u32(m.channels(), "channels")?);
        // Standard layout iteration order is row-major (y, x, c).
        w.f32s(m.values().iter());
        w.f32s(m.attention().iter());
    }
    Ok(w.finish())
}

pub fn decode_dense(bytes: &[u8]) -> Result<Vec<DenseFeatureMap>> {
    let mut r = ByteReader::new("VPRD", bytes);
    r.header(MAGIC, Some(VERSION))?;
    let count = r.u32()? as usize;
    let mut maps = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let id = r.id()?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        let cells = h
            .checked_mul(w)
            .and_then(|hw| hw.checked_mul(c))
            .ok_or_else(|| VprError::Malformed(format!("dimensions {h}×{w}×{c} overflow")))?;
        let values = Array3::from_shape_vec((h, w, c), r.f32s(cells)?).expect("length checked");
        let attention = Array2::from_shape_vec((h, w), r.f32s(h * w)?).expect("length checked");
        maps.push(DenseFeatureMap::new(id, values, attention)?);
    }
    r.finish()?;
    Ok(maps)
}

pub fn write_dense(maps: &[DenseFeatureMap], path: impl AsRef<Path>) -> Result<usize> {
    write_atomic(path, &encode_dense(maps)?)
}

pub fn read_dense(path: impl AsRef<Path>) -> Result<Vec<DenseFeatureMap>> {
    decode_dense(&read_file(path)?)
}

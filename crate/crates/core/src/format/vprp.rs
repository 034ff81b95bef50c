//! `VPRP` PCA model.
//!
//! ```text
//! "VPRP" | d_in u32 | d_out u32 | d_in × f32 mean | d_out·d_in × f32 components (row-major)
//! ```

use std::path::Path;

use ndarray::Array2;

use super::{count_u32, read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::Result;
use crate::postproc::PcaModel;

pub const MAGIC: &[u8; 4] = b"VPRP";

pub fn encode_pca(model: &PcaModel) -> Result<Vec<u8>> {
    let mut w = ByteWriter::with_magic(MAGIC);
    w.u32(count_u32(model.d_in(), "d_in")?);
    w.u32(count_u32(model.d_out(), "d_out")?);
    w.f32s(model.mean());
    w.f32s(model.components().iter());
    Ok(w.finish())
}

pub fn decode_pca(bytes: &[u8]) -> Result<PcaModel> {
    let mut r = ByteReader::new("VPRP", bytes);
    r.header(MAGIC, None)?;
    let d_in = r.u32()? as usize;
    let d_out = r.u32()? as usize;
    let mean = r.f32s(d_in)?;
    let components = Array2::from_shape_vec((d_out, d_in), r.f32s(d_out.saturating_mul(d_in))?)
        .expect("length checked");
    r.finish()?;
    PcaModel::from_parts(mean, components)
}

pub fn write_pca(model: &PcaModel, path: impl AsRef<Path>) -> Result<usize> {
    write_atomic(path, &encode_pca(model)?)
}

pub fn read_pca(path: impl AsRef<Path>) -> Result<PcaModel> {
    decode_pca(&read_file(path)?)
}

//! `VPRG` star-graph cache for a database store.
//!
//! ```text
//! "VPRG" | version u32 = 1 | h f32 | image_count u32
//! per image:
//!   feature_count u32
//!   per root (in feature order): leaf_count u16 | leaf_count × u16 leaf index
//! ```
//!
//! Images appear in the same order as in the `VPRF` store they were built
//! from; the root of graph `n` is feature `n`.

use std::path::Path;

use super::{count_u32, read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Result, VprError};
use crate::lpg::{StarGraph, StarGraphSet};

pub const MAGIC: &[u8; 4] = b"VPRG";
pub const VERSION: u32 = 1;

fn index_u16(v: usize) -> Result<u16> {
    u16::try_from(v)
        .map_err(|_| VprError::Malformed(format!("index {v} does not fit the u16 graph format")))
}

pub fn encode_graphs(sets: &[StarGraphSet]) -> Result<Vec<u8>> {
    let h = sets.first().map_or(0.0, StarGraphSet::h);
    let mut w = ByteWriter::with_magic(MAGIC);
    w.u32(VERSION);
    w.f32(h);
    w.u32(count_u32(sets.len(), "image count")?);
    for set in sets {
        if set.h() != h {
            return Err(VprError::Malformed(format!(
                "mixed window sizes {h} and {} in one cache",
                set.h()
            )));
        }
        w.u32(count_u32(set.len(), "feature count")?);
        for g in set.graphs() {
            w.u16(index_u16(g.leaves.len())?);
            for &leaf in &g.leaves {
                w.u16(index_u16(leaf)?);
            }
        }
    }
    Ok(w.finish())
}

pub fn decode_graphs(bytes: &[u8]) -> Result<Vec<StarGraphSet>> {
    let mut r = ByteReader::new("VPRG", bytes);
    r.header(MAGIC, Some(VERSION))?;
    let h = r.f32()?;
    let count = r.u32()? as usize;
    let mut sets = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let mut graphs = Vec::with_capacity(n.min(1 << 16));
        for root in 0..n {
            let leaf_count = r.u16()? as usize;
            let leaves = (0..leaf_count)
                .map(|_| r.u16().map(usize::from))
                .collect::<Result<Vec<_>>>()?;
            graphs.push(StarGraph { root, leaves });
        }
        sets.push(StarGraphSet::from_parts(h, graphs)?);
    }
    r.finish()?;
    Ok(sets)
}

pub fn write_graphs(sets: &[StarGraphSet], path: impl AsRef<Path>) -> Result<usize> {
    write_atomic(path, &encode_graphs(sets)?)
}

pub fn read_graphs(path: impl AsRef<Path>) -> Result<Vec<StarGraphSet>> {
    decode_graphs(&read_file(path)?)
}

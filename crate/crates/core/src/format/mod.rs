//! Little-endian binary containers.
//!
//! | magic  | contents                                   |
//! |--------|--------------------------------------------|
//! | `VPRF` | local feature store ([`vprf`])             |
//! | `VPRD` | dense feature + attention maps ([`vprd`])  |
//! | `VPRP` | PCA model ([`vprp`])                       |
//! | `VPRG` | star-graph cache ([`vprg`])                |
//!
//! Reals are stored as `f32` and widened to `f64` on load. Writers go through
//! a temporary file in the destination directory and rename it into place,
//! so a failed write never leaves a partial file behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, VprError};

pub mod vprd;
pub mod vprf;
pub mod vprg;
pub mod vprp;

pub use vprd::{decode_dense, encode_dense, read_dense, write_dense};
pub use vprf::{decode_store, encode_store, read_store, write_store};
pub use vprg::{decode_graphs, encode_graphs, read_graphs, write_graphs};
pub use vprp::{decode_pca, encode_pca, read_pca, write_pca};

/// Writes `bytes` to `path` via a sibling temp file and an atomic rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<usize> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| VprError::Io(e.error))?;
    Ok(bytes.len())
}

pub(crate) fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_magic(magic: &[u8; 4]) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    pub fn f32s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for &v in vs {
            self.f32(v);
        }
    }

    /// `u16` length prefix followed by UTF-8 bytes.
    pub fn id(&mut self, id: &str) -> Result<()> {
        let len = u16::try_from(id.len())
            .map_err(|_| VprError::Malformed(format!("id longer than 65535 bytes: {id:.32}…")))?;
        self.u16(len);
        self.buf.extend_from_slice(id.as_bytes());
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    format: &'static str,
    data: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(format: &'static str, data: &'a [u8]) -> Self {
        Self {
            format,
            data,
            offset: 0,
        }
    }

    /// Checks magic and, when given, the version field that follows it.
    pub fn header(&mut self, magic: &[u8; 4], version: Option<u32>) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("took 4 bytes");
        if &found != magic {
            return Err(VprError::BadMagic {
                expected: *magic,
                found,
            });
        }
        if let Some(expected) = version {
            let found = self.u32()?;
            if found != expected {
                return Err(VprError::VersionMismatch {
                    format: self.format,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.data.len() - self.offset;
        if available < n {
            return Err(VprError::Truncated {
                format: self.format,
                offset: self.offset,
                needed: n - available,
            });
        }
        let out = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    /// Reads `n` reals. The byte length is checked up front so a bogus count
    /// in a corrupt header fails fast instead of allocating.
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| VprError::Malformed("element count overflows".into()))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn id(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| VprError::Malformed(format!("id at offset {} is not UTF-8", self.offset)))
    }

    /// Trailing bytes are an error: they mean the header lied about counts.
    pub fn finish(self) -> Result<()> {
        if self.offset == self.data.len() {
            Ok(())
        } else {
            Err(VprError::Malformed(format!(
                "{} trailing bytes after {} payload",
                self.data.len() - self.offset,
                self.format
            )))
        }
    }
}

pub(crate) fn count_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| VprError::Malformed(format!("{what} {n} exceeds u32")))
}

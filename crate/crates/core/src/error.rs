use std::io;

use thiserror::Error;

/// Everything that can go wrong inside the engine.
///
/// File-format failures get their own variants so callers (the CLI in
/// particular) can map them to distinct messages and exit codes.
#[derive(Debug, Error)]
pub enum VprError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {format} version {found} (expected {expected})")]
    VersionMismatch {
        format: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("truncated {format} file: needed {needed} more bytes at offset {offset}")]
    Truncated {
        format: &'static str,
        offset: usize,
        needed: usize,
    },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("descriptor length mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("position ({x}, {y}) outside [0, 100)")]
    PositionOutOfRange { x: f64, y: f64 },

    #[error("zero-norm descriptor at row {0}")]
    ZeroNorm(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("image {0} has no holistic descriptor")]
    MissingHolistic(String),

    #[error("ground truth has no positive pairs")]
    NoPositives,
}

pub type Result<T, E = VprError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> VprError {
    VprError::InvalidParameter(msg.into())
}

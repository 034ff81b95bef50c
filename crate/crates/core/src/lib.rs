//! Hierarchical visual place recognition.
//!
//! Images are represented by sets of local features (a normalized position
//! plus a unit descriptor). Retrieval runs in two stages: a holistic
//! descriptor, bundled from the local features with hyperdimensional
//! computing, selects the top-K database candidates, and the candidates are
//! re-ranked with a local-feature similarity. Three re-rankers are provided:
//!
//! - [`matching`]: mutual nearest-neighbour matching (MM),
//! - [`lpg`]: local positional graphs, which weight each mutual match by how
//!   well the displacements of its neighbouring matches agree,
//! - [`geometry`]: RANSAC fundamental-matrix verification.
//!
//! [`postproc`] turns dense network outputs into local features, [`eval`]
//! scores rankings and times the comparison stage, and [`synthetic`] builds
//! seeded worlds with planted correspondences for testing.

pub mod error;
pub mod eval;
pub mod format;
pub mod geometry;
pub mod hdc;
pub mod lpg;
pub mod matching;
pub mod model;
pub mod postproc;
pub mod retrieval;
pub mod synthetic;

pub use error::{Result, VprError};
pub use model::{
    DenseFeatureMap, GroundTruth, ImageFeatureSet, LocalFeature, Position, RankedEntry,
    RetrievalResult, Stage, POSITION_RANGE,
};

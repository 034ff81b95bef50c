//! Domain types shared by every stage of the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VprError};

/// Upper (exclusive) bound of the normalized position space on both axes.
pub const POSITION_RANGE: f64 = 100.0;

/// A feature position in normalized units, `[0, 100)` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_range(&self) -> bool {
        (0.0..POSITION_RANGE).contains(&self.x) && (0.0..POSITION_RANGE).contains(&self.y)
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.in_range() {
            Ok(())
        } else {
            Err(VprError::PositionOutOfRange {
                x: self.x,
                y: self.y,
            })
        }
    }

    pub fn offset(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }
}

/// One local feature: where it is and what it looks like.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeature {
    pub pos: Position,
    pub desc: Vec<f64>,
}

impl LocalFeature {
    pub fn new(pos: Position, desc: Vec<f64>) -> Self {
        Self { pos, desc }
    }
}

/// All local features of one image, plus the holistic descriptor once
/// aggregation has run.
///
/// Descriptors are kept as one contiguous `n × d_loc` matrix so similarity
/// matrices reduce to a single matrix product.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureSet {
    id: String,
    positions: Vec<Position>,
    descriptors: Array2<f64>,
    holistic: Option<Vec<f64>>,
}

impl ImageFeatureSet {
    /// Builds a set from parallel position and descriptor arrays.
    pub fn new(
        id: impl Into<String>,
        positions: Vec<Position>,
        descriptors: Array2<f64>,
    ) -> Result<Self> {
        if positions.len() != descriptors.nrows() {
            return Err(VprError::Malformed(format!(
                "{} positions but {} descriptors",
                positions.len(),
                descriptors.nrows()
            )));
        }
        positions.iter().try_for_each(Position::check)?;
        Ok(Self {
            id: id.into(),
            positions,
            descriptors,
            holistic: None,
        })
    }

    /// Builds a set from a feature list. All descriptors must share a length.
    pub fn from_features(id: impl Into<String>, features: Vec<LocalFeature>) -> Result<Self> {
        let d_loc = features.first().map_or(0, |f| f.desc.len());
        let mut flat = Vec::with_capacity(features.len() * d_loc);
        let mut positions = Vec::with_capacity(features.len());
        for f in features {
            if f.desc.len() != d_loc {
                return Err(VprError::DimensionMismatch {
                    expected: d_loc,
                    found: f.desc.len(),
                });
            }
            positions.push(f.pos);
            flat.extend(f.desc);
        }
        let descriptors = Array2::from_shape_vec((positions.len(), d_loc), flat)
            .expect("shape matches collected length");
        Self::new(id, positions, descriptors)
    }

    /// An image with no features.
    pub fn empty(id: impl Into<String>, d_loc: usize) -> Self {
        Self {
            id: id.into(),
            positions: Vec::new(),
            descriptors: Array2::zeros((0, d_loc)),
            holistic: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Descriptor length; 0 for an empty set built without one.
    pub fn d_loc(&self) -> usize {
        self.descriptors.ncols()
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> Position {
        self.positions[i]
    }

    pub fn descriptors(&self) -> ArrayView2<'_, f64> {
        self.descriptors.view()
    }

    pub fn descriptor(&self, i: usize) -> ArrayView1<'_, f64> {
        self.descriptors.row(i)
    }

    pub fn holistic(&self) -> Option<&[f64]> {
        self.holistic.as_deref()
    }

    pub fn set_holistic(&mut self, holistic: Option<Vec<f64>>) {
        self.holistic = holistic;
    }

    pub fn with_holistic(mut self, holistic: Vec<f64>) -> Self {
        self.holistic = Some(holistic);
        self
    }

    pub fn features(&self) -> impl Iterator<Item = LocalFeature> + '_ {
        self.positions
            .iter()
            .zip(self.descriptors.rows())
            .map(|(&pos, d)| LocalFeature::new(pos, d.to_vec()))
    }

    /// Scales every descriptor to unit length in place. Cosine similarities
    /// are unchanged.
    pub fn normalize_descriptors(&mut self) -> Result<()> {
        crate::matching::normalize_rows(&mut self.descriptors)
    }

    /// Returns a copy with every position moved by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        let positions = self.positions.iter().map(|p| p.offset(dx, dy)).collect();
        let mut out = Self::new(self.id.clone(), positions, self.descriptors.clone())?;
        out.holistic = self.holistic.clone();
        Ok(out)
    }
}

/// A dense network output: an `H × W × C` descriptor tensor and an `H × W`
/// attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    pub id: String,
    values: Array3<f64>,
    attention: Array2<f64>,
}

impl DenseFeatureMap {
    pub fn new(id: impl Into<String>, values: Array3<f64>, attention: Array2<f64>) -> Result<Self> {
        let (h, w, c) = values.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(VprError::Malformed(format!(
                "dense map dimensions must be positive, got {h}×{w}×{c}"
            )));
        }
        if attention.dim() != (h, w) {
            return Err(VprError::Malformed(format!(
                "attention map is {:?} but tensor is {h}×{w}",
                attention.dim()
            )));
        }
        Ok(Self {
            id: id.into(),
            values,
            attention,
        })
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn attention(&self) -> &Array2<f64> {
        &self.attention
    }
}

/// Correct database matches per query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruth {
    pub matches: BTreeMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, db_id: impl Into<String>) {
        self.matches
            .entry(query_id.into())
            .or_default()
            .insert(db_id.into());
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.matches.get(query_id)
    }

    pub fn is_match(&self, query_id: &str, db_id: &str) -> bool {
        self.matches
            .get(query_id)
            .is_some_and(|set| set.contains(db_id))
    }

    pub fn positive_count(&self) -> usize {
        self.matches.values().map(BTreeSet::len).sum()
    }

    /// Checks that every referenced id exists in the given stores.
    pub fn validate<'a>(
        &self,
        db_ids: impl IntoIterator<Item = &'a str>,
        query_ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        let db: BTreeSet<&str> = db_ids.into_iter().collect();
        let queries: BTreeSet<&str> = query_ids.into_iter().collect();
        for (q, dbs) in &self.matches {
            if !queries.contains(q.as_str()) {
                return Err(VprError::Malformed(format!(
                    "ground truth references unknown query {q}"
                )));
            }
            if let Some(missing) = dbs.iter().find(|d| !db.contains(d.as_str())) {
                return Err(VprError::Malformed(format!(
                    "ground truth references unknown database image {missing}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| VprError::Malformed(format!("ground truth: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }
}

/// Which stage produced an entry's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Holistic,
    Reranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub db_id: String,
    pub score: f64,
    pub stage: Stage,
}

/// A ranked database list for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranking: Vec<RankedEntry>,
}

impl RetrievalResult {
    /// Database ids in rank order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranking.iter().map(|e| e.db_id.as_str())
    }

    /// 1-based rank of the first ground-truth hit, if any.
    pub fn first_hit_rank(&self, gt: &BTreeSet<String>) -> Option<usize> {
        self.ranking
            .iter()
            .position(|e| gt.contains(&e.db_id))
            .map(|r| r + 1)
    }
}

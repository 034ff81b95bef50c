//! Local positional graphs.
//!
//! Every database feature is the root of a star graph whose leaves are the
//! other features inside an `h × h` window centered on it. Graphs depend only
//! on the database image and are built once, offline.
//!
//! At query time each mutually matched root pair `(i, j)` is scored by how
//! well the positions of its matched leaves agree once both graphs are
//! expressed relative to their roots:
//!
//! ```text
//! δ_k  = (p_db[k] − p_db[i]) − (p_q[m(k)] − p_q[j])
//! w_ij = (1/K) Σ_k exp(−‖δ_k‖² / 2σ²)
//! ```
//!
//! over the `K` leaves of root `i` that are themselves matched (`m(k)` is the
//! query feature matched to leaf `k`). A root with no leaves at all keeps
//! weight 1; a root whose leaves all went unmatched gets weight 0. The
//! weights then enter the usual match-weighted image similarity.

use crate::error::{invalid, Result, VprError};
use crate::matching::{match_sets, weighted_similarity, MatchSet, Similarity};
use crate::model::{ImageFeatureSet, Position};

/// Default Gaussian width in normalized position units.
pub const DEFAULT_SIGMA: f64 = 1.0;
/// Default window size in normalized position units.
pub const DEFAULT_H: f64 = 60.0;

/// One star graph: a root feature and the feature indices in its window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StarGraph {
    pub root: usize,
    pub leaves: Vec<usize>,
}

/// The star graphs of one database image, one per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct StarGraphSet {
    h: f64,
    graphs: Vec<StarGraph>,
}

impl StarGraphSet {
    /// Reassembles a graph set (e.g. from a cache file). Roots must be in
    /// feature order and never appear among their own leaves.
    pub fn from_parts(h: f64, graphs: Vec<StarGraph>) -> Result<Self> {
        if h.is_nan() || h <= 0.0 {
            return Err(invalid(format!("window size must be positive, got {h}")));
        }
        let n = graphs.len();
        for (k, g) in graphs.iter().enumerate() {
            if g.root != k {
                return Err(VprError::Malformed(format!(
                    "graph {k} has root {}",
                    g.root
                )));
            }
            if g.leaves.iter().any(|&l| l == k || l >= n) {
                return Err(VprError::Malformed(format!(
                    "graph {k} has an invalid leaf index"
                )));
            }
        }
        Ok(Self { h, graphs })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn graphs(&self) -> &[StarGraph] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

/// Builds one star graph per feature. Leaves satisfy `|Δx| ≤ h/2` and
/// `|Δy| ≤ h/2` relative to the root.
pub fn build_star_graphs(feats: &ImageFeatureSet, h: f64) -> Result<StarGraphSet> {
    if !h.is_finite() || h <= 0.0 {
        return Err(invalid(format!("window size must be positive, got {h}")));
    }
    let half = h / 2.0;
    let pos = feats.positions();

    // Sweep over x-sorted features so each root only scans its x-band.
    let mut by_x: Vec<usize> = (0..pos.len()).collect();
    by_x.sort_by(|&a, &b| pos[a].x.total_cmp(&pos[b].x).then(a.cmp(&b)));
    let xs: Vec<f64> = by_x.iter().map(|&k| pos[k].x).collect();

    let graphs = (0..pos.len())
        .map(|root| {
            let p = pos[root];
            let lo = xs.partition_point(|&x| x < p.x - half);
            let mut leaves: Vec<usize> = by_x[lo..]
                .iter()
                .take_while(|&&k| pos[k].x <= p.x + half)
                .copied()
                .filter(|&k| k != root && in_window(p, pos[k], half))
                .collect();
            leaves.sort_unstable();
            StarGraph { root, leaves }
        })
        .collect();
    Ok(StarGraphSet { h, graphs })
}

fn in_window(root: Position, other: Position, half: f64) -> bool {
    (other.x - root.x).abs() <= half && (other.y - root.y).abs() <= half
}

/// Number of samples in a [`GaussianLut`].
pub const LUT_SIZE: usize = 4096;
/// The table covers `r² ∈ [0, LUT_DOMAIN_SIGMAS · σ²]`.
pub const LUT_DOMAIN_SIGMAS: f64 = 50.0;

/// `exp(−r²/2σ²)` sampled uniformly in `r²` and linearly interpolated.
/// Arguments past the end of the table evaluate to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLut {
    sigma: f64,
    domain_max: f64,
    inv_step: f64,
    entries: Vec<f64>,
}

impl GaussianLut {
    pub fn new(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let domain_max = LUT_DOMAIN_SIGMAS * sigma * sigma;
        let step = domain_max / (LUT_SIZE - 1) as f64;
        let entries = (0..LUT_SIZE)
            .map(|i| (-(i as f64 * step) / (2.0 * sigma * sigma)).exp())
            .collect();
        Ok(Self {
            sigma,
            domain_max,
            inv_step: 1.0 / step,
            entries,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn domain_max(&self) -> f64 {
        self.domain_max
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn eval(&self, delta_sq: f64) -> f64 {
        if delta_sq > self.domain_max {
            return 0.0;
        }
        let t = delta_sq * self.inv_step;
        let i = (t as usize).min(LUT_SIZE - 2);
        let frac = t - i as f64;
        self.entries[i] + frac * (self.entries[i + 1] - self.entries[i])
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("sigma must be positive, got {sigma}")))
    }
}

/// How displacement scores are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum GaussianKernel {
    Exact { sigma: f64 },
    Lut(GaussianLut),
}

impl GaussianKernel {
    pub fn exact(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(Self::Exact { sigma })
    }

    pub fn lut(sigma: f64) -> Result<Self> {
        Ok(Self::Lut(GaussianLut::new(sigma)?))
    }

    pub fn sigma(&self) -> f64 {
        match self {
            Self::Exact { sigma } => *sigma,
            Self::Lut(l) => l.sigma,
        }
    }

    #[inline]
    pub fn eval(&self, delta_sq: f64) -> f64 {
        match self {
            Self::Exact { sigma } => (-delta_sq / (2.0 * sigma * sigma)).exp(),
            Self::Lut(l) => l.eval(delta_sq),
        }
    }
}

/// Unnormalized Gaussian of a squared displacement, optionally through a LUT.
pub fn gaussian_weight(delta_sq: f64, sigma: f64, lut: Option<&GaussianLut>) -> Result<f64> {
    check_sigma(sigma)?;
    if delta_sq < 0.0 || delta_sq.is_nan() {
        return Err(invalid(format!(
            "squared displacement must be ≥ 0, got {delta_sq}"
        )));
    }
    Ok(match lut {
        Some(l) => l.eval(delta_sq),
        None => (-delta_sq / (2.0 * sigma * sigma)).exp(),
    })
}

/// Weights for each mutual match, aligned with `matches.pairs`.
pub fn lpg_weights(
    db_graphs: &StarGraphSet,
    db_positions: &[Position],
    q_positions: &[Position],
    matches: &MatchSet,
    kernel: &GaussianKernel,
) -> Vec<f64> {
    let query_of_db = matches.query_of_db(db_positions.len());
    matches
        .pairs
        .iter()
        .map(|m| {
            let leaves = &db_graphs.graphs[m.db].leaves;
            if leaves.is_empty() {
                return 1.0;
            }
            let root_db = db_positions[m.db];
            let root_q = q_positions[m.query];
            let (mut sum, mut k) = (0.0, 0usize);
            for &leaf in leaves {
                if let Some(qj) = query_of_db[leaf] {
                    let leaf_q = q_positions[qj];
                    let leaf_db = db_positions[leaf];
                    let dx = (leaf_db.x - root_db.x) - (leaf_q.x - root_q.x);
                    let dy = (leaf_db.y - root_db.y) - (leaf_q.y - root_q.y);
                    sum += kernel.eval(dx * dx + dy * dy);
                    k += 1;
                }
            }
            if k == 0 {
                0.0
            } else {
                sum / k as f64
            }
        })
        .collect()
}

/// LPG-weighted similarity for an already matched pair.
pub fn score_lpg_matched(
    db_graphs: &StarGraphSet,
    db_positions: &[Position],
    q_positions: &[Position],
    matches: &MatchSet,
    kernel: &GaussianKernel,
) -> Result<Similarity> {
    if db_graphs.len() != db_positions.len() {
        return Err(VprError::Malformed(format!(
            "{} star graphs for {} database features",
            db_graphs.len(),
            db_positions.len()
        )));
    }
    if db_positions.is_empty() || q_positions.is_empty() {
        return Ok(Similarity::DEGENERATE_ZERO);
    }
    let w = lpg_weights(db_graphs, db_positions, q_positions, matches, kernel);
    Ok(Similarity {
        value: weighted_similarity(matches, w, db_positions.len(), q_positions.len()),
        degenerate: false,
    })
}

/// LPG-weighted image similarity. Graphs are built on the database side, so
/// the score is not symmetric in its arguments.
pub fn score_lpg(
    db_graphs: &StarGraphSet,
    db: &ImageFeatureSet,
    q: &ImageFeatureSet,
    kernel: &GaussianKernel,
) -> Result<Similarity> {
    let matches = match_sets(db, q)?;
    score_lpg_matched(db_graphs, db.positions(), q.positions(), &matches, kernel)
}

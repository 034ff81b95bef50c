//! Fundamental-matrix verification of mutual matches.
//!
//! Hypotheses come from the normalized 8-point algorithm on random minimal
//! samples; a match is an inlier when its Sampson distance is within `τ`.
//! The loop stops early once the confidence target is reached and the best
//! consensus is refit by least squares. When no hypothesis can be formed at
//! all (too few matches, zero parallax, every sample degenerate) every match
//! is kept, which reduces the score to plain mutual matching.
//!
//! Convention: `x_qᵀ · F · x_db = 0`.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matching::{match_sets, weighted_similarity, MatchSet, Similarity};
use crate::model::{ImageFeatureSet, Position};

/// Size of a minimal sample.
pub const MIN_SAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Sampson distance threshold in normalized position units.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub min_matches: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            inlier_threshold: 2.0,
            confidence: 0.99,
            min_matches: MIN_SAMPLE,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(invalid("RANSAC needs at least one iteration"));
        }
        if self.inlier_threshold.is_nan() || self.inlier_threshold <= 0.0 {
            return Err(invalid(format!(
                "inlier threshold must be positive, got {}",
                self.inlier_threshold
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(invalid(format!(
                "confidence must be in (0, 1), got {}",
                self.confidence
            )));
        }
        if self.min_matches < MIN_SAMPLE {
            return Err(invalid(format!(
                "min_matches must be at least {MIN_SAMPLE}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalEstimate {
    /// Rank-2, unit Frobenius norm. Zero when `degenerate`.
    pub fundamental: Matrix3<f64>,
    pub inlier_mask: Vec<bool>,
    pub degenerate: bool,
}

impl FundamentalEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }

    fn all_inliers(n: usize) -> Self {
        Self {
            fundamental: Matrix3::zeros(),
            inlier_mask: vec![true; n],
            degenerate: true,
        }
    }
}

/// A correspondence: database position, query position.
pub type PointPair = (Position, Position);

/// Similarity transform moving the centroid to the origin and the mean
/// distance to √2.
fn hartley(points: impl Iterator<Item = Position> + Clone) -> Matrix3<f64> {
    let n = points.clone().count().max(1) as f64;
    let (sx, sy) = points
        .clone()
        .fold((0.0, 0.0), |a, p| (a.0 + p.x, a.1 + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points.map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: Position) -> (f64, f64) {
    (t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

fn design_row(a: (f64, f64), b: (f64, f64)) -> [f64; 9] {
    // a = db, b = query, constraint bᵀ F a = 0.
    let (x, y) = a;
    let (u, v) = b;
    [u * x, u * y, u, v * x, v * y, v, x, y, 1.0]
}

/// Null vector of an 8×9 system by Gaussian elimination with full pivoting.
/// `None` when the system has rank below 8.
fn null_vector_8x9(rows: &[[f64; 9]; 8]) -> Option<[f64; 9]> {
    let mut a = *rows;
    let mut cols: [usize; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for k in 0..8 {
        let (mut pr, mut pc, mut best) = (k, k, 0.0);
        for (r, row) in a.iter().enumerate().skip(k) {
            for (c, v) in row.iter().enumerate().skip(k) {
                if v.abs() > best {
                    (pr, pc, best) = (r, c, v.abs());
                }
            }
        }
        if best <= 1e-10 * scale {
            return None;
        }
        a.swap(k, pr);
        if pc != k {
            for row in a.iter_mut() {
                row.swap(k, pc);
            }
            cols.swap(k, pc);
        }
        for r in k + 1..8 {
            let f = a[r][k] / a[k][k];
            if f != 0.0 {
                let pivot = a[k];
                for (x, p) in a[r][k..].iter_mut().zip(&pivot[k..]) {
                    *x -= f * p;
                }
            }
        }
    }
    // Free variable is the last permuted column.
    let mut z = [0.0; 9];
    z[8] = 1.0;
    for k in (0..8).rev() {
        let s: f64 = (k + 1..9).map(|c| a[k][c] * z[c]).sum();
        z[k] = -s / a[k][k];
    }
    let mut f = [0.0; 9];
    for (i, &c) in cols.iter().enumerate() {
        f[c] = z[i];
    }
    Some(f)
}

/// Least-squares null vector via the smallest eigenvector of `AᵀA`.
fn null_vector_lsq(rows: &[[f64; 9]]) -> Option<[f64; 9]> {
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for r in rows {
        for i in 0..9 {
            for j in i..9 {
                ata[(i, j)] += r[i] * r[j];
            }
        }
    }
    for i in 0..9 {
        for j in 0..i {
            ata[(i, j)] = ata[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let top = eig.eigenvalues[order[8]];
    // A second near-zero eigenvalue means the solution is not unique.
    if top <= 0.0 || eig.eigenvalues[order[1]] <= 1e-12 * top {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]);
    Some(std::array::from_fn(|i| v[i]))
}

/// Rank-2 projection, denormalization and Frobenius normalization.
fn finalize(f: [f64; 9], t_db: &Matrix3<f64>, t_q: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let fhat = Matrix3::from_row_slice(&f);
    let svd = fhat.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    // nalgebra sorts singular values in descending order.
    s[2] = 0.0;
    let rank2 = u * Matrix3::from_diagonal(&s) * vt;
    let full = t_q.transpose() * rank2 * t_db;
    let norm = full.norm();
    (norm > 0.0 && norm.is_finite()).then(|| full / norm)
}

/// First-order geometric distance of a correspondence to `F`.
pub fn sampson_distance(f: &Matrix3<f64>, db: Position, q: Position) -> f64 {
    let a = Vector3::new(db.x, db.y, 1.0);
    let b = Vector3::new(q.x, q.y, 1.0);
    let fa = f * a;
    let ftb = f.transpose() * b;
    let e = b.dot(&fa);
    let denom = fa.x * fa.x + fa.y * fa.y + ftb.x * ftb.x + ftb.y * ftb.y;
    if denom > 0.0 {
        e.abs() / denom.sqrt()
    } else if e == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Normalized 8-point estimate from at least eight correspondences.
pub fn eight_point(pairs: &[PointPair]) -> Option<Matrix3<f64>> {
    if pairs.len() < MIN_SAMPLE {
        return None;
    }
    let t_db = hartley(pairs.iter().map(|p| p.0));
    let t_q = hartley(pairs.iter().map(|p| p.1));
    let rows: Vec<[f64; 9]> = pairs
        .iter()
        .map(|&(a, b)| design_row(apply(&t_db, a), apply(&t_q, b)))
        .collect();
    let f = if rows.len() == MIN_SAMPLE {
        null_vector_8x9(&rows.clone().try_into().ok()?)?
    } else {
        null_vector_lsq(&rows)?
    };
    finalize(f, &t_db, &t_q)
}

fn inliers(f: &Matrix3<f64>, pairs: &[PointPair], tau: f64, mask: &mut [bool]) -> usize {
    let mut count = 0;
    for (m, &(a, b)) in mask.iter_mut().zip(pairs) {
        *m = sampson_distance(f, a, b) <= tau;
        count += usize::from(*m);
    }
    count
}

fn required_iterations(inlier_ratio: f64, confidence: f64) -> f64 {
    let p_good = inlier_ratio.powi(MIN_SAMPLE as i32);
    if p_good >= 1.0 {
        return 1.0;
    }
    if p_good <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / (1.0 - p_good).ln()
}

/// Robust fundamental-matrix estimation. Deterministic for a given seed.
pub fn ransac_fundamental(
    pairs: &[PointPair],
    params: &RansacParams,
    seed: u64,
) -> Result<FundamentalEstimate> {
    params.validate()?;
    let n = pairs.len();
    if n < params.min_matches {
        return Ok(FundamentalEstimate::all_inliers(n));
    }

    // Normalization is computed once over all matches; minimal samples are
    // solved in normalized coordinates and scored in the original ones.
    let t_db = hartley(pairs.iter().map(|p| p.0));
    let t_q = hartley(pairs.iter().map(|p| p.1));
    let rows: Vec<[f64; 9]> = pairs
        .iter()
        .map(|&(a, b)| design_row(apply(&t_db, a), apply(&t_q, b)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Matrix3<f64>, usize)> = None;
    let mut best_mask = vec![false; n];
    let mut mask = vec![false; n];
    let mut limit = params.max_iterations as f64;
    let mut iter = 0usize;
    let mut sample_rows = [[0.0; 9]; MIN_SAMPLE];

    while (iter as f64) < limit {
        iter += 1;
        let sample = rand::seq::index::sample(&mut rng, n, MIN_SAMPLE);
        for (slot, idx) in sample_rows.iter_mut().zip(sample.iter()) {
            *slot = rows[idx];
        }
        let Some(f) = null_vector_8x9(&sample_rows).and_then(|f| finalize(f, &t_db, &t_q)) else {
            continue;
        };
        let count = inliers(&f, pairs, params.inlier_threshold, &mut mask);
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((f, count));
            best_mask.copy_from_slice(&mask);
            let ratio = count as f64 / n as f64;
            limit = required_iterations(ratio, params.confidence).min(params.max_iterations as f64);
        }
    }

    let Some((mut f, mut count)) = best else {
        return Ok(FundamentalEstimate::all_inliers(n));
    };

    if count >= MIN_SAMPLE {
        let consensus: Vec<PointPair> = pairs
            .iter()
            .zip(&best_mask)
            .filter_map(|(p, &m)| m.then_some(*p))
            .collect();
        if let Some(refit) = eight_point(&consensus) {
            let refit_count = inliers(&refit, pairs, params.inlier_threshold, &mut mask);
            if refit_count >= count {
                f = refit;
                count = refit_count;
                best_mask.copy_from_slice(&mask);
            }
        }
    }
    debug_assert!(count <= n);

    Ok(FundamentalEstimate {
        fundamental: f,
        inlier_mask: best_mask,
        degenerate: false,
    })
}

/// RANSAC-weighted similarity for an already matched pair.
pub fn score_ransac_matched(
    db_positions: &[Position],
    q_positions: &[Position],
    matches: &MatchSet,
    params: &RansacParams,
    seed: u64,
) -> Result<Similarity> {
    if db_positions.is_empty() || q_positions.is_empty() {
        return Ok(Similarity::DEGENERATE_ZERO);
    }
    let pairs: Vec<PointPair> = matches
        .pairs
        .iter()
        .map(|m| (db_positions[m.db], q_positions[m.query]))
        .collect();
    let est = ransac_fundamental(&pairs, params, seed)?;
    let weights = est.inlier_mask.iter().map(|&m| f64::from(u8::from(m)));
    Ok(Similarity {
        value: weighted_similarity(matches, weights, db_positions.len(), q_positions.len()),
        degenerate: est.degenerate,
    })
}

/// RANSAC-weighted image similarity.
pub fn score_ransac(
    db: &ImageFeatureSet,
    q: &ImageFeatureSet,
    params: &RansacParams,
    seed: u64,
) -> Result<Similarity> {
    let matches = match_sets(db, q)?;
    score_ransac_matched(db.positions(), q.positions(), &matches, params, seed)
}

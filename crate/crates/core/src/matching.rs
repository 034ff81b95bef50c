//! Descriptor similarity, mutual nearest-neighbour matching and the
//! match-weighted image similarity shared by all re-rankers.
//!
//! The image similarity is
//!
//! ```text
//! S = Σ w_ij · cos(D_db[i], D_q[j]) / √(|D_db| · |D_q|)
//! ```
//!
//! where the weights come from the re-ranker. For plain mutual matching
//! `w_ij` is 1 on mutual matches and 0 elsewhere.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Result, VprError};
use crate::model::ImageFeatureSet;

/// Row-normalized copy of a descriptor matrix, kept in f64 and in its f32
/// rounding (the latter drives the fast pass of [`mutual_match_units`]).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitDescriptors {
    exact: Array2<f64>,
    fast: Array2<f32>,
}

impl UnitDescriptors {
    pub fn new(descriptors: ArrayView2<f64>) -> Result<Self> {
        let mut exact = descriptors.to_owned();
        normalize_rows(&mut exact)?;
        Ok(Self::from_unit(exact))
    }

    /// Wraps rows that are already unit length.
    pub fn from_unit(exact: Array2<f64>) -> Self {
        let fast = to_f32(exact.view());
        Self { exact, fast }
    }

    pub fn of(set: &ImageFeatureSet) -> Result<Self> {
        Self::new(set.descriptors())
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.exact.view()
    }

    pub fn rows(&self) -> UnitRows<'_> {
        UnitRows {
            exact: self.exact.view(),
            fast: self.fast.view(),
        }
    }

    pub fn len(&self) -> usize {
        self.exact.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.exact.nrows() == 0
    }

    /// `|self| × |other|` cosine matrix, clamped to `[-1, 1]`.
    pub fn cosine_with(&self, other: &Self) -> Result<Array2<f64>> {
        unit_cosine(self.view(), other.view())
    }
}

/// Element-wise f32 rounding of a descriptor matrix.
pub fn to_f32(a: ArrayView2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

/// Borrowed unit-length rows in both precisions.
#[derive(Debug, Clone, Copy)]
pub struct UnitRows<'a> {
    exact: ArrayView2<'a, f64>,
    fast: ArrayView2<'a, f32>,
}

impl<'a> UnitRows<'a> {
    /// `exact` must have unit rows and `fast` must be its f32 rounding
    /// ([`to_f32`]); only the shapes are checked.
    pub fn new(exact: ArrayView2<'a, f64>, fast: ArrayView2<'a, f32>) -> Result<Self> {
        if exact.dim() != fast.dim() {
            return Err(VprError::Malformed(format!(
                "f32 descriptor copy has shape {:?}, expected {:?}",
                fast.dim(),
                exact.dim()
            )));
        }
        Ok(Self { exact, fast })
    }

    pub fn len(&self) -> usize {
        self.exact.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.exact.nrows() == 0
    }
}

/// Scales every row to unit length in place.
pub fn normalize_rows(a: &mut Array2<f64>) -> Result<()> {
    for (i, mut row) in a.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(VprError::ZeroNorm(i));
        }
        row /= norm;
    }
    Ok(())
}

/// Cosine matrix of two row-normalized descriptor matrices, clamped to
/// `[-1, 1]`. Rows are assumed to be unit length already.
pub fn unit_cosine(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Ok(Array2::zeros((a.nrows(), b.nrows())));
    }
    if a.ncols() != b.ncols() {
        return Err(VprError::DimensionMismatch {
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    Ok(a.dot(&b.t()).mapv_into(|v| v.clamp(-1.0, 1.0)))
}

/// `M[i][j] = cos(A_i, B_j)`.
pub fn cosine_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (mut a, mut b) = (a.to_owned(), b.to_owned());
    normalize_rows(&mut a)?;
    normalize_rows(&mut b)?;
    unit_cosine(a.view(), b.view())
}

/// One mutual match: database feature `db`, query feature `query`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub db: usize,
    pub query: usize,
    pub cos: f64,
}

/// Mutual matches, sorted by database index. Each index appears at most once
/// on either side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// For each database feature, the query feature it is matched to.
    pub fn query_of_db(&self, db_len: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; db_len];
        for m in &self.pairs {
            out[m.db] = Some(m.query);
        }
        out
    }
}

fn argmax<I: Iterator<Item = f64>>(values: I) -> Option<usize> {
    // Strict comparison keeps the lowest index on ties.
    values
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, bv)) if v <= bv => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Pairs `(i, j)` where `j` is the row argmax of `i` and `i` the column
/// argmax of `j`. Ties go to the lowest index.
pub fn mutual_matches(m: ArrayView2<f64>) -> MatchSet {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return MatchSet::default();
    }
    let col_best: Vec<usize> = m
        .axis_iter(Axis(1))
        .map(|c| argmax(c.iter().copied()).expect("non-empty column"))
        .collect();
    let pairs = m
        .axis_iter(Axis(0))
        .enumerate()
        .filter_map(|(i, row)| {
            let j = argmax(row.iter().copied())?;
            (col_best[j] == i).then(|| Match {
                db: i,
                query: j,
                cos: row[j],
            })
        })
        .collect();
    MatchSet { pairs }
}

/// An image similarity plus whether it came from a degenerate input (an
/// empty feature set, or geometry that could not be estimated).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

impl Similarity {
    pub const DEGENERATE_ZERO: Self = Self {
        value: 0.0,
        degenerate: true,
    };
}

/// `Σ w·cos / √(n_db · n_q)` over the given matches and weights.
pub fn weighted_similarity(
    matches: &MatchSet,
    weights: impl IntoIterator<Item = f64>,
    n_db: usize,
    n_q: usize,
) -> f64 {
    if n_db == 0 || n_q == 0 {
        return 0.0;
    }
    let sum: f64 = matches
        .pairs
        .iter()
        .zip(weights)
        .map(|(m, w)| w * m.cos)
        .sum();
    sum / ((n_db * n_q) as f64).sqrt()
}

/// Largest possible `|c32 − c|` between the f32 product of two unit
/// vectors of length `k` (rounded to f32, accumulated in f32 in any order)
/// and their exact cosine, plus slack for the f64 reference itself.
/// `None` when `k` is too large for the bound to be useful.
fn f32_cosine_error_bound(k: usize) -> Option<f64> {
    let n = (k as f64 + 3.0) * (f64::from(f32::EPSILON) / 2.0);
    (n < 0.01).then(|| n / (1.0 - n) + 1e-12)
}

fn exact_cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b).clamp(-1.0, 1.0)
}

/// Index of the largest exact value among the entries of `fast` within
/// `2·bound` of their maximum; ties go to the lowest index. The exact
/// argmax of the whole line always lies in that window and everything
/// outside it is strictly smaller, so this is the exact argmax.
fn refined_argmax(fast: ArrayView1<f32>, bound: f64, exact: impl Fn(usize) -> f64) -> usize {
    let max = fast.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let floor = f64::from(max) - 2.0 * bound;
    let mut window = fast
        .iter()
        .enumerate()
        .filter(|(_, &v)| f64::from(v) >= floor)
        .map(|(j, _)| j);
    let first = window.next().expect("non-empty line");
    let Some(second) = window.next() else {
        return first;
    };
    let mut best = (first, exact(first));
    for j in std::iter::once(second).chain(window) {
        let v = exact(j);
        if v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

/// Mutual matches between two sets of unit descriptors.
///
/// Equal to [`mutual_matches`] over the matrix of f64 row dot products
/// (clamped to `[-1, 1]`), which is also where each match's cosine comes
/// from. The full matrix is only formed in f32, about twice as fast as
/// f64; entries that could still be a row or column maximum given the f32
/// rounding bound are re-evaluated in f64 to settle each argmax exactly.
pub fn mutual_match_units(db: UnitRows, q: UnitRows) -> Result<MatchSet> {
    if db.is_empty() || q.is_empty() {
        return Ok(MatchSet::default());
    }
    let k = db.exact.ncols();
    if q.exact.ncols() != k {
        return Err(VprError::DimensionMismatch {
            expected: k,
            found: q.exact.ncols(),
        });
    }
    let exact = |i: usize, j: usize| exact_cosine(db.exact.row(i), q.exact.row(j));
    let Some(bound) = f32_cosine_error_bound(k) else {
        let m = Array2::from_shape_fn((db.len(), q.len()), |(i, j)| exact(i, j));
        return Ok(mutual_matches(m.view()));
    };
    let fast = db.fast.dot(&q.fast.t());
    let col_best: Vec<usize> = fast
        .axis_iter(Axis(1))
        .enumerate()
        .map(|(j, col)| refined_argmax(col, bound, |i| exact(i, j)))
        .collect();
    let pairs = fast
        .axis_iter(Axis(0))
        .enumerate()
        .filter_map(|(i, row)| {
            let j = refined_argmax(row, bound, |j| exact(i, j));
            (col_best[j] == i).then(|| Match {
                db: i,
                query: j,
                cos: exact(i, j),
            })
        })
        .collect();
    Ok(MatchSet { pairs })
}

/// Mutual-match similarity from precomputed unit descriptors.
pub fn score_mm_unit(db: &UnitDescriptors, q: &UnitDescriptors) -> Result<(Similarity, MatchSet)> {
    score_mm_rows(db.rows(), q.rows())
}

/// Mutual-match similarity of two sets of unit rows, with the matches.
pub fn score_mm_rows(db: UnitRows, q: UnitRows) -> Result<(Similarity, MatchSet)> {
    if db.is_empty() || q.is_empty() {
        return Ok((Similarity::DEGENERATE_ZERO, MatchSet::default()));
    }
    let matches = mutual_match_units(db, q)?;
    let value = weighted_similarity(&matches, std::iter::repeat(1.0), db.len(), q.len());
    Ok((
        Similarity {
            value,
            degenerate: false,
        },
        matches,
    ))
}

/// Mutual-match image similarity.
pub fn score_mm(db: &ImageFeatureSet, q: &ImageFeatureSet) -> Result<Similarity> {
    if db.is_empty() || q.is_empty() {
        return Ok(Similarity::DEGENERATE_ZERO);
    }
    Ok(score_mm_unit(&UnitDescriptors::of(db)?, &UnitDescriptors::of(q)?)?.0)
}

/// Matches for a pair of feature sets.
pub fn match_sets(db: &ImageFeatureSet, q: &ImageFeatureSet) -> Result<MatchSet> {
    if db.is_empty() || q.is_empty() {
        return Ok(MatchSet::default());
    }
    mutual_match_units(
        UnitDescriptors::of(db)?.rows(),
        UnitDescriptors::of(q)?.rows(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LocalFeature, Position};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_from(descs: &[Vec<f64>]) -> ImageFeatureSet {
        let feats = descs
            .iter()
            .enumerate()
            .map(|(i, d)| LocalFeature::new(Position::new(i as f64, 1.0), d.clone()))
            .collect();
        ImageFeatureSet::from_features("s", feats).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn cosine_examples() {
        let m = cosine_matrix(array![[0.6, 0.8]].view(), array![[0.6, 0.8]].view()).unwrap();
        assert_abs_diff_eq!(m[[0, 0]], 1.0, epsilon = 1e-12);
        let m = cosine_matrix(array![[1.0, 0.0]].view(), array![[0.0, 2.0]].view()).unwrap();
        assert_abs_diff_eq!(m[[0, 0]], 0.0, epsilon = 1e-9);
        assert!(matches!(
            cosine_matrix(array![[0.0, 0.0]].view(), array![[1.0, 0.0]].view()),
            Err(VprError::ZeroNorm(0))
        ));
    }

    #[test]
    fn cosine_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((5, 9), |_| rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_fn((7, 9), |_| rng.random_range(-2.0..2.0));
        let m = cosine_matrix(a.view(), b.view()).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for k in 0..9 {
                    dot += a[[i, k]] * b[[j, k]];
                    na += a[[i, k]] * a[[i, k]];
                    nb += b[[j, k]] * b[[j, k]];
                }
                assert_abs_diff_eq!(m[[i, j]], dot / (na.sqrt() * nb.sqrt()), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn mutual_match_examples() {
        let m = array![[1.0, 0.2, 0.1], [0.3, 0.9, 0.0], [0.1, 0.4, 0.8]];
        let got: Vec<_> = mutual_matches(m.view())
            .pairs
            .iter()
            .map(|p| (p.db, p.query))
            .collect();
        assert_eq!(got, vec![(0, 0), (1, 1), (2, 2)]);

        // Row 0 → col 1, row 1 → col 1 too but col 1 prefers row 0.
        let m = array![[0.1, 0.9, 0.2], [0.3, 0.8, 0.1]];
        let got: Vec<_> = mutual_matches(m.view())
            .pairs
            .iter()
            .map(|p| (p.db, p.query))
            .collect();
        assert_eq!(got, vec![(0, 1)]);

        let m = array![[0.5, 0.5]];
        let got: Vec<_> = mutual_matches(m.view())
            .pairs
            .iter()
            .map(|p| (p.db, p.query))
            .collect();
        assert_eq!(got, vec![(0, 0)]);

        assert!(mutual_matches(Array2::<f64>::zeros((0, 3)).view()).is_empty());
    }

    #[test]
    fn score_mm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let descs: Vec<_> = (0..6).map(|_| unit(&mut rng, 16)).collect();
        let s = score_mm(&set_from(&descs), &set_from(&descs)).unwrap();
        assert_abs_diff_eq!(s.value, 1.0, epsilon = 1e-9);
        assert!(!s.degenerate);

        let db = set_from(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let q = set_from(&[vec![0.0, 0.0, 1.0, 0.0]]);
        assert_abs_diff_eq!(score_mm(&db, &q).unwrap().value, 0.5, epsilon = 1e-12);

        let empty = ImageFeatureSet::empty("e", 4);
        assert_eq!(score_mm(&db, &empty).unwrap(), Similarity::DEGENERATE_ZERO);
    }

    #[test]
    fn orthogonal_best_match_scores_zero() {
        // A non-empty matrix always has one mutual match (its global maximum);
        // here that match has cosine 0, so nothing is added.
        let db = set_from(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = set_from(&[vec![0.0, -1.0]]);
        let s = score_mm(&db, &q).unwrap();
        assert_abs_diff_eq!(s.value, 0.0, epsilon = 1e-12);
    }

    /// Reference: plain f64 dot-product matrix, then mutual argmax.
    fn reference_matches(a: &UnitDescriptors, b: &UnitDescriptors) -> MatchSet {
        let m = Array2::from_shape_fn((a.len(), b.len()), |(i, j)| {
            a.view().row(i).dot(&b.view().row(j)).clamp(-1.0, 1.0)
        });
        mutual_matches(m.view())
    }

    /// Rows that nearly coincide: copies of a few prototypes with tiny
    /// perturbations, so f32 alone cannot settle most argmaxes.
    fn near_ties(
        rng: &mut ChaCha8Rng,
        n: usize,
        d: usize,
        protos: &[Vec<f64>],
        eps: f64,
    ) -> Array2<f64> {
        let mut a = Array2::from_shape_fn((n, d), |(i, k)| {
            protos[i % protos.len()][k] + eps * rng.random_range(-1.0..1.0)
        });
        normalize_rows(&mut a).unwrap();
        a
    }

    #[test]
    fn fast_matching_equals_f64_reference_at_full_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 1024;
        let protos: Vec<_> = (0..40).map(|_| unit(&mut rng, d)).collect();
        for eps in [0.0, 1e-9, 1e-6, 1e-3, 0.5] {
            let a = UnitDescriptors::from_unit(near_ties(&mut rng, 200, d, &protos, eps));
            let b = UnitDescriptors::from_unit(near_ties(&mut rng, 150, d, &protos, eps));
            assert_eq!(
                mutual_match_units(a.rows(), b.rows()).unwrap(),
                reference_matches(&a, &b)
            );
        }
    }

    #[test]
    fn f32_products_stay_within_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 1024;
        let bound = f32_cosine_error_bound(d).unwrap();
        let a = UnitDescriptors::new(
            Array2::from_shape_fn((50, d), |_| rng.random_range(-1.0..1.0)).view(),
        )
        .unwrap();
        let fast = a.fast.dot(&a.fast.t());
        let exact = a.view().dot(&a.view().t());
        let worst = (&fast.mapv(f64::from) - &exact)
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(worst <= bound, "{worst} > {bound}");
    }

    #[test]
    fn very_long_descriptors_fall_back_to_f64() {
        let d = 200_000;
        assert!(f32_cosine_error_bound(d).is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = UnitDescriptors::new(
            Array2::from_shape_fn((3, d), |_| rng.random_range(-1.0..1.0)).view(),
        )
        .unwrap();
        let b = UnitDescriptors::new(
            Array2::from_shape_fn((2, d), |_| rng.random_range(-1.0..1.0)).view(),
        )
        .unwrap();
        assert_eq!(
            mutual_match_units(a.rows(), b.rows()).unwrap(),
            reference_matches(&a, &b)
        );
        assert_eq!(
            mutual_match_units(a.rows(), a.rows()).unwrap(),
            reference_matches(&a, &a)
        );
    }

    #[test]
    fn mismatched_copies_are_rejected() {
        let a = UnitDescriptors::new(array![[1.0, 0.0]].view()).unwrap();
        let b = UnitDescriptors::new(array![[1.0, 0.0, 0.0]].view()).unwrap();
        assert!(matches!(
            mutual_match_units(a.rows(), b.rows()),
            Err(VprError::DimensionMismatch { .. })
        ));
        assert!(UnitRows::new(a.view(), b.fast.view()).is_err());
    }

    proptest! {
        #[test]
        fn fast_matching_equals_f64_reference(
            seed in any::<u64>(),
            n in 1usize..30,
            m in 1usize..30,
            d in 1usize..64,
            protos in 1usize..6,
            eps_exp in -12i32..0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let protos: Vec<_> = (0..protos).map(|_| unit(&mut rng, d)).collect();
            let eps = 10f64.powi(eps_exp);
            let a = UnitDescriptors::from_unit(near_ties(&mut rng, n, d, &protos, eps));
            let b = UnitDescriptors::from_unit(near_ties(&mut rng, m, d, &protos, eps));
            prop_assert_eq!(mutual_match_units(a.rows(), b.rows()).unwrap(), reference_matches(&a, &b));
        }

        #[test]
        fn matching_is_a_partial_bijection_and_scale_invariant(
            seed in any::<u64>(), n in 1usize..12, m in 1usize..12, scale in 0.1f64..10.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<_> = (0..n).map(|_| unit(&mut rng, 8)).collect();
            let b: Vec<_> = (0..m).map(|_| unit(&mut rng, 8)).collect();
            let (sa, sb) = (set_from(&a), set_from(&b));
            let ms = match_sets(&sa, &sb).unwrap();
            let mut seen_db = std::collections::HashSet::new();
            let mut seen_q = std::collections::HashSet::new();
            for p in &ms.pairs {
                prop_assert!(seen_db.insert(p.db));
                prop_assert!(seen_q.insert(p.query));
                prop_assert!((-1.0..=1.0).contains(&p.cos));
            }
            let scaled: Vec<_> = a.iter().map(|d| d.iter().map(|v| v * scale).collect()).collect();
            let ms2 = match_sets(&set_from(&scaled), &sb).unwrap();
            let idx = |s: &MatchSet| s.pairs.iter().map(|p| (p.db, p.query)).collect::<Vec<_>>();
            prop_assert_eq!(idx(&ms), idx(&ms2));

            let s_ab = score_mm(&sa, &sb).unwrap().value;
            let s_ba = score_mm(&sb, &sa).unwrap().value;
            prop_assert!((s_ab - s_ba).abs() < 1e-12);
            prop_assert!(s_ab <= 1.0 + 1e-12);
        }
    }
}

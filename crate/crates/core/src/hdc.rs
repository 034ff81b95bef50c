//! Holistic descriptors from local features via hyperdimensional computing.
//!
//! Each local descriptor is lifted to `D_hdc` dimensions by a fixed Gaussian
//! random projection and bound (elementwise product) to a code for its image
//! position. The bound vectors are bundled (summed) and L2-normalized.
//!
//! Position codes come from a coarse grid of `n_x × n_y` anchors. Each axis
//! has its own random ±1 hypervectors; the code at grid node `(i, j)` is
//! `x_anchor[i] ⊙ y_anchor[j]`, and positions between nodes interpolate the
//! four surrounding node codes bilinearly.
//!
//! Because the position code is linear in the node codes, the bundle can be
//! computed per node: `H = Σ_a A_a ⊙ P·(Σ_k w_ka d_k)`. That needs one
//! projection per grid node instead of one per feature.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VprError};
use crate::model::{ImageFeatureSet, Position, POSITION_RANGE};

/// Codebook dimensions and seed; enough to regenerate the codebook exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HdcConfig {
    pub seed: u64,
    pub dim: usize,
    pub n_x: usize,
    pub n_y: usize,
}

impl Default for HdcConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 4096,
            n_x: 5,
            n_y: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdcCodebook {
    config: HdcConfig,
    d_loc: usize,
    /// `dim × d_loc`.
    projection: Array2<f64>,
    /// `n_x × dim`, entries ±1.
    x_anchors: Array2<f64>,
    /// `n_y × dim`, entries ±1.
    y_anchors: Array2<f64>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_signs(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn(
        (rows, dim),
        || if rng.random::<bool>() { 1.0 } else { -1.0 },
    )
}

/// Deterministically generates a codebook.
pub fn hdc_init(
    seed: u64,
    dim: usize,
    n_x: usize,
    n_y: usize,
    d_loc: usize,
) -> Result<HdcCodebook> {
    HdcCodebook::new(
        HdcConfig {
            seed,
            dim,
            n_x,
            n_y,
        },
        d_loc,
    )
}

impl HdcCodebook {
    pub fn new(config: HdcConfig, d_loc: usize) -> Result<Self> {
        let HdcConfig {
            seed,
            dim,
            n_x,
            n_y,
        } = config;
        if dim == 0 || d_loc == 0 {
            return Err(invalid("HDC and descriptor dimensions must be positive"));
        }
        // Interpolation needs at least two anchors per axis.
        if n_x < 2 || n_y < 2 {
            return Err(invalid(format!(
                "need at least 2 anchors per axis, got {n_x}×{n_y}"
            )));
        }
        let mut rng = rng_for(seed, 0);
        let projection =
            Array2::from_shape_simple_fn((dim, d_loc), || rng.sample::<f64, _>(StandardNormal));
        let x_anchors = random_signs(&mut rng_for(seed, 1), n_x, dim);
        let y_anchors = random_signs(&mut rng_for(seed, 2), n_y, dim);
        Ok(Self {
            config,
            d_loc,
            projection,
            x_anchors,
            y_anchors,
        })
    }

    pub fn config(&self) -> HdcConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn d_loc(&self) -> usize {
        self.d_loc
    }

    pub fn x_anchors(&self) -> ArrayView2<'_, f64> {
        self.x_anchors.view()
    }

    pub fn y_anchors(&self) -> ArrayView2<'_, f64> {
        self.y_anchors.view()
    }

    pub fn projection(&self) -> ArrayView2<'_, f64> {
        self.projection.view()
    }

    /// Grid node indices and bilinear weights of a position, as
    /// `[(i, j, weight); 4]`.
    fn bilinear(&self, pos: Position) -> [(usize, usize, f64); 4] {
        let (n_x, n_y) = (self.config.n_x, self.config.n_y);
        let axis = |v: f64, n: usize| {
            let t = v / POSITION_RANGE * (n - 1) as f64;
            let i = (t.floor() as usize).min(n - 2);
            (i, t - i as f64)
        };
        let (i, fx) = axis(pos.x, n_x);
        let (j, fy) = axis(pos.y, n_y);
        [
            (i, j, (1.0 - fx) * (1.0 - fy)),
            (i + 1, j, fx * (1.0 - fy)),
            (i, j + 1, (1.0 - fx) * fy),
            (i + 1, j + 1, fx * fy),
        ]
    }

    /// Code of grid node `(i, j)`: `x_anchor[i] ⊙ y_anchor[j]`.
    pub fn node_code(&self, i: usize, j: usize) -> Array1<f64> {
        &self.x_anchors.row(i) * &self.y_anchors.row(j)
    }

    /// Bilinearly interpolated position code.
    pub fn encode_position(&self, pos: Position) -> Result<Array1<f64>> {
        pos.check()?;
        let mut code = Array1::zeros(self.dim());
        for (i, j, w) in self.bilinear(pos) {
            if w != 0.0 {
                code.scaled_add(w, &self.node_code(i, j));
            }
        }
        Ok(code)
    }

    /// Projected descriptor bound to its position code, for a single feature.
    pub fn bind(&self, pos: Position, desc: ArrayView1<f64>) -> Result<Array1<f64>> {
        if desc.len() != self.d_loc {
            return Err(VprError::DimensionMismatch {
                expected: self.d_loc,
                found: desc.len(),
            });
        }
        Ok(self.projection.dot(&desc) * self.encode_position(pos)?)
    }

    /// Bundles a feature set into a holistic descriptor.
    pub fn aggregate(&self, feats: &ImageFeatureSet) -> Result<HolisticDescriptor> {
        if feats.is_empty() {
            return Ok(HolisticDescriptor {
                values: vec![0.0; self.dim()],
                empty: true,
            });
        }
        if feats.d_loc() != self.d_loc {
            return Err(VprError::DimensionMismatch {
                expected: self.d_loc,
                found: feats.d_loc(),
            });
        }
        let (n_x, n_y) = (self.config.n_x, self.config.n_y);
        // Per-node weighted descriptor sums, node index = j * n_x + i.
        let mut node_sums = Array2::<f64>::zeros((n_x * n_y, self.d_loc));
        for (pos, desc) in feats.positions().iter().zip(feats.descriptors().rows()) {
            pos.check()?;
            for (i, j, w) in self.bilinear(*pos) {
                if w != 0.0 {
                    node_sums.row_mut(j * n_x + i).scaled_add(w, &desc);
                }
            }
        }
        // (nodes × d_loc) · (d_loc × dim)
        let projected = node_sums.dot(&self.projection.t());
        let mut h = Array1::<f64>::zeros(self.dim());
        for (node, row) in projected.axis_iter(Axis(0)).enumerate() {
            let (i, j) = (node % n_x, node / n_x);
            let xa = self.x_anchors.row(i);
            let ya = self.y_anchors.row(j);
            ndarray::Zip::from(&mut h)
                .and(&row)
                .and(&xa)
                .and(&ya)
                .for_each(|h, &p, &x, &y| *h += p * x * y);
        }
        let norm = h.dot(&h).sqrt();
        if norm == 0.0 {
            return Ok(HolisticDescriptor {
                values: h.to_vec(),
                empty: true,
            });
        }
        Ok(HolisticDescriptor {
            values: (h / norm).to_vec(),
            empty: false,
        })
    }
}

/// An L2-normalized holistic descriptor. `empty` marks the zero vector
/// produced for an image without features.
#[derive(Debug, Clone, PartialEq)]
pub struct HolisticDescriptor {
    pub values: Vec<f64>,
    pub empty: bool,
}

pub fn hdc_aggregate(cb: &HdcCodebook, feats: &ImageFeatureSet) -> Result<HolisticDescriptor> {
    cb.aggregate(feats)
}

/// Aggregates every set in parallel and stores the result in its holistic
/// slot. Returns how many sets had no features.
pub fn attach_holistic(cb: &HdcCodebook, sets: &mut [ImageFeatureSet]) -> Result<usize> {
    use rayon::prelude::*;
    sets.par_iter_mut()
        .map(|s| {
            let h = cb.aggregate(s)?;
            s.set_holistic(Some(h.values));
            Ok(usize::from(h.empty))
        })
        .sum()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Database indices of the `k` highest-cosine holistic descriptors, with
/// their cosines, best first. Ties go to the lower index; `k` larger than
/// the database returns everything.
pub fn holistic_topk(query: &[f64], db: ArrayView2<f64>, k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if db.nrows() == 0 {
        return Err(VprError::Empty("holistic database"));
    }
    if db.ncols() != query.len() {
        return Err(VprError::DimensionMismatch {
            expected: db.ncols(),
            found: query.len(),
        });
    }
    let q = ArrayView1::from(query);
    let qn = q.dot(&q).sqrt();
    let dots = db.dot(&q);
    let mut scored: Vec<(usize, f64)> = db
        .axis_iter(Axis(0))
        .zip(dots.iter())
        .enumerate()
        .map(|(i, (row, &dot))| {
            let rn = row.dot(&row).sqrt();
            let c = if rn == 0.0 || qn == 0.0 {
                0.0
            } else {
                dot / (rn * qn)
            };
            (i, c)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LocalFeature;
    use approx::assert_abs_diff_eq;
    use rand_distr::Distribution;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ImageFeatureSet {
        let feats = (0..n)
            .map(|_| {
                let desc: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let norm = desc.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
                LocalFeature::new(
                    Position::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)),
                    desc.into_iter().map(|v| v / norm).collect(),
                )
            })
            .collect();
        ImageFeatureSet::from_features("r", feats).unwrap()
    }

    #[test]
    fn codebook_is_reproducible_and_signed() {
        let a = hdc_init(42, 256, 5, 9, 16).unwrap();
        let b = hdc_init(42, 256, 5, 9, 16).unwrap();
        assert_eq!(a, b);
        for row in a.x_anchors().rows().into_iter().chain(a.y_anchors().rows()) {
            assert!(row.iter().all(|&v| v == 1.0 || v == -1.0));
            assert_abs_diff_eq!(row.dot(&row).sqrt(), 16.0, epsilon = 1e-12);
        }
        assert!(hdc_init(1, 256, 1, 9, 16).is_err());
    }

    #[test]
    fn different_seeds_give_unrelated_anchors() {
        let mut total = 0.0;
        let mut count = 0;
        for s in 0..100u64 {
            let a = hdc_init(2 * s, 4096, 5, 9, 1).unwrap();
            let b = hdc_init(2 * s + 1, 4096, 5, 9, 1).unwrap();
            for (ra, rb) in a.x_anchors().rows().into_iter().zip(b.x_anchors().rows()) {
                total += cosine(ra.as_slice().unwrap(), rb.as_slice().unwrap()).abs();
                count += 1;
            }
        }
        assert!(total / (count as f64) < 0.1);
    }

    #[test]
    fn position_code_interpolation() {
        let cb = hdc_init(3, 512, 5, 9, 4).unwrap();
        let at_origin = cb.encode_position(Position::new(0.0, 0.0)).unwrap();
        assert_eq!(at_origin, cb.node_code(0, 0));

        // x-nodes sit at 0, 25, 50, 75, 100; y-nodes every 12.5.
        let mid = cb.encode_position(Position::new(12.5, 25.0)).unwrap();
        let expected = (cb.node_code(0, 2) + cb.node_code(1, 2)) * 0.5;
        for (a, b) in mid.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let p = Position::new(37.3, 61.9);
        let a = cb.encode_position(p).unwrap();
        let b = cb.encode_position(p.offset(1e-6, 1e-6)).unwrap();
        let diff = (&a - &b).mapv(|v| v * v).sum().sqrt();
        assert!(diff <= 1e-4);

        assert!(cb.encode_position(Position::new(100.0, 0.0)).is_err());
    }

    #[test]
    fn aggregation_matches_per_feature_bundling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cb = hdc_init(5, 1024, 5, 9, 32).unwrap();
        let set = random_set(&mut rng, 25, 32);
        let h = cb.aggregate(&set).unwrap();
        let mut naive = Array1::<f64>::zeros(1024);
        for f in set.features() {
            naive += &cb.bind(f.pos, ArrayView1::from(&f.desc)).unwrap();
        }
        assert_abs_diff_eq!(
            cosine(&h.values, naive.as_slice().unwrap()),
            1.0,
            epsilon = 1e-9
        );
        let norm: f64 = h.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn single_feature_equals_its_binding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = hdc_init(9, 2048, 5, 9, 8).unwrap();
        let set = random_set(&mut rng, 1, 8);
        let h = cb.aggregate(&set).unwrap();
        let bound = cb.bind(set.position(0), set.descriptor(0)).unwrap();
        assert_abs_diff_eq!(
            cosine(&h.values, bound.as_slice().unwrap()),
            1.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn aggregation_is_order_invariant_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cb = hdc_init(1, 1024, 5, 9, 16).unwrap();
        let set = random_set(&mut rng, 40, 16);
        let mut feats: Vec<LocalFeature> = set.features().collect();
        feats.reverse();
        feats.swap(3, 17);
        let shuffled = ImageFeatureSet::from_features("r", feats).unwrap();
        let (a, b) = (
            cb.aggregate(&set).unwrap(),
            cb.aggregate(&shuffled).unwrap(),
        );
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-9);
        }
        assert_eq!(cb.aggregate(&set).unwrap(), a);
    }

    #[test]
    fn empty_set_is_flagged() {
        let cb = hdc_init(1, 64, 5, 9, 4).unwrap();
        let h = cb.aggregate(&ImageFeatureSet::empty("e", 4)).unwrap();
        assert!(h.empty);
        assert!(h.values.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(cb.aggregate(&random_set(&mut rng, 3, 5)).is_err());
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let db = Array2::from_shape_fn((30, 12), |_| rng.random_range(-1.0..1.0));
        let q: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle: Vec<(usize, f64)> = (0..30)
            .map(|i| (i, cosine(&q, db.row(i).as_slice().unwrap())))
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got = holistic_topk(&q, db.view(), 30).unwrap();
        let ids = |v: &[(usize, f64)]| v.iter().map(|p| p.0).collect::<Vec<_>>();
        assert_eq!(ids(&got), ids(&oracle));
        assert_eq!(
            ids(&holistic_topk(&q, db.view(), 7).unwrap()),
            ids(&oracle[..7])
        );
        assert_eq!(holistic_topk(&q, db.view(), 100).unwrap().len(), 30);

        let exact = db.row(13).to_vec();
        assert_eq!(holistic_topk(&exact, db.view(), 1).unwrap()[0].0, 13);
        assert!(holistic_topk(&q, db.view(), 0).is_err());
        assert!(holistic_topk(&q, Array2::zeros((0, 12)).view(), 3).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let db = ndarray::array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let got = holistic_topk(&[1.0, 0.0], db.view(), 3).unwrap();
        assert_eq!(got.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 2, 1]);
    }
}

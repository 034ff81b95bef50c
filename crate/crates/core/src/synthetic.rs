//! Seeded test worlds.
//!
//! [`gen_world`] builds a database of random feature sets and a query set in
//! which every query is a perturbed copy of one database image.
//! [`gen_epipolar_pairs`] produces point correspondences that obey a known
//! two-view geometry. Every image draws from its own ChaCha stream, so
//! output depends only on the seed and never on thread scheduling.

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::Array2;
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::sampson_distance;
use crate::model::{GroundTruth, ImageFeatureSet, Position, POSITION_RANGE};

/// Largest `f32` strictly below the position range.
fn max_position() -> f64 {
    f64::from(f32::from_bits((POSITION_RANGE as f32).to_bits() - 1))
}

/// Rounds a coordinate to `f32` and keeps it inside `[0, 100)`.
fn quantize_coord(v: f64) -> f64 {
    f64::from(v as f32).clamp(0.0, max_position())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub db_size: usize,
    pub query_size: usize,
    pub features_per_image: usize,
    pub d_loc: usize,
    /// Norm of the Gaussian perturbation added to each unit descriptor
    /// (in expectation) before re-normalization.
    pub descriptor_noise: f64,
    /// Each query position moves by an independent uniform offset in
    /// `[-jitter, jitter]` per axis.
    pub position_jitter: f64,
    /// Fraction of query features replaced by unrelated random features.
    pub outlier_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            db_size: 100,
            query_size: 10,
            features_per_image: 200,
            d_loc: 1024,
            descriptor_noise: 0.0,
            position_jitter: 0.0,
            outlier_fraction: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.db_size == 0
            || self.query_size == 0
            || self.features_per_image == 0
            || self.d_loc == 0
        {
            return Err(invalid("world sizes must all be positive"));
        }
        for (name, v) in [
            ("descriptor_noise", self.descriptor_noise),
            ("position_jitter", self.position_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(invalid(format!(
                "outlier_fraction must lie in [0, 1], got {}",
                self.outlier_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub db: Vec<ImageFeatureSet>,
    pub queries: Vec<ImageFeatureSet>,
    pub ground_truth: GroundTruth,
    /// Database index each query was copied from.
    pub sources: Vec<usize>,
}

pub fn db_id(i: usize) -> String {
    format!("db_{i:05}")
}

pub fn query_id(i: usize) -> String {
    format!("q_{i:05}")
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream layout: 0 picks query sources, 1.. database images, then queries.
fn db_stream(i: usize) -> u64 {
    1 + i as u64
}

fn query_stream(cfg: &WorldConfig, j: usize) -> u64 {
    1 + cfg.db_size as u64 + j as u64
}

fn random_position(rng: &mut ChaCha8Rng) -> Position {
    Position::new(
        quantize_coord(rng.random_range(0.0..POSITION_RANGE)),
        quantize_coord(rng.random_range(0.0..POSITION_RANGE)),
    )
}

/// Unit descriptor in `f32` precision.
fn random_descriptor(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Some(u) = unit_f32(v) {
            return u;
        }
    }
}

fn unit_f32(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    for x in &mut v {
        *x = f64::from((*x / norm) as f32);
    }
    Some(v)
}

fn random_image(id: String, rng: &mut ChaCha8Rng, n: usize, d: usize) -> ImageFeatureSet {
    let positions = (0..n).map(|_| random_position(rng)).collect();
    let mut flat = Vec::with_capacity(n * d);
    for _ in 0..n {
        flat.extend(random_descriptor(rng, d));
    }
    let descs = Array2::from_shape_vec((n, d), flat).expect("n*d values");
    ImageFeatureSet::new(id, positions, descs).expect("generated positions are in range")
}

fn perturb(
    cfg: &WorldConfig,
    id: String,
    src: &ImageFeatureSet,
    rng: &mut ChaCha8Rng,
) -> ImageFeatureSet {
    let n = src.len();
    let d = src.d_loc();
    let mut positions = src.positions().to_vec();
    let mut descs = src.descriptors().to_owned();
    let per_component = cfg.descriptor_noise / (d as f64).sqrt();

    for (i, pos) in positions.iter_mut().enumerate() {
        if cfg.descriptor_noise > 0.0 {
            let noisy = descs
                .row(i)
                .iter()
                .map(|&x| x + per_component * rng.sample::<f64, _>(StandardNormal))
                .collect();
            // A zero vector after noise is vanishingly unlikely; fall back to
            // a fresh random direction rather than fail.
            let unit = unit_f32(noisy).unwrap_or_else(|| random_descriptor(rng, d));
            descs.row_mut(i).assign(&ndarray::ArrayView1::from(&unit));
        }
        if cfg.position_jitter > 0.0 {
            let j = cfg.position_jitter;
            *pos = Position::new(
                quantize_coord(pos.x + rng.random_range(-j..=j)),
                quantize_coord(pos.y + rng.random_range(-j..=j)),
            );
        }
    }

    let n_out = (cfg.outlier_fraction * n as f64).round() as usize;
    if n_out > 0 {
        for i in sample(rng, n, n_out.min(n)).into_iter() {
            positions[i] = random_position(rng);
            let desc = random_descriptor(rng, d);
            descs.row_mut(i).assign(&ndarray::ArrayView1::from(&desc));
        }
    }
    ImageFeatureSet::new(id, positions, descs).expect("perturbed positions are clamped")
}

/// Generates a database, queries copied from it with perturbation, and the
/// ground truth linking each query to its source.
pub fn gen_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut pick = stream_rng(cfg.seed, 0);
    let sources: Vec<usize> = if cfg.query_size <= cfg.db_size {
        sample(&mut pick, cfg.db_size, cfg.query_size).into_vec()
    } else {
        (0..cfg.query_size)
            .map(|_| pick.random_range(0..cfg.db_size))
            .collect()
    };

    let db: Vec<ImageFeatureSet> = (0..cfg.db_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, db_stream(i));
            random_image(db_id(i), &mut rng, cfg.features_per_image, cfg.d_loc)
        })
        .collect();
    let queries: Vec<ImageFeatureSet> = sources
        .par_iter()
        .enumerate()
        .map(|(j, &src)| {
            let mut rng = stream_rng(cfg.seed, query_stream(cfg, j));
            perturb(cfg, query_id(j), &db[src], &mut rng)
        })
        .collect();

    let mut ground_truth = GroundTruth::new();
    for (j, &src) in sources.iter().enumerate() {
        ground_truth.insert(query_id(j), db_id(src));
    }
    Ok(World {
        db,
        queries,
        ground_truth,
        sources,
    })
}

/// Correspondences between a database view and a query view.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarPairs {
    pub db: Vec<Position>,
    pub query: Vec<Position>,
    pub inlier: Vec<bool>,
    /// Generating geometry, `x_qᵀ F x_db = 0`, unit Frobenius norm.
    pub fundamental: Matrix3<f64>,
}

impl EpipolarPairs {
    pub fn len(&self) -> usize {
        self.db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.db.is_empty()
    }
}

const FOCAL: f64 = 40.0;
/// Minimum Sampson distance of an outlier pair from the true geometry.
pub const OUTLIER_MARGIN: f64 = 5.0;
const CENTER: f64 = 50.0;
// Baseline and depth range give 10–40 units of disparity, so the epipolar
// geometry is well constrained at the default inlier threshold.
const BASELINE: f64 = 3.0;
const DEPTH_RANGE: (f64, f64) = (3.0, 12.0);

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

fn project(k: &Matrix3<f64>, p: &Vector3<f64>) -> Option<Position> {
    if p.z <= 1e-6 {
        return None;
    }
    let h = k * p;
    let pos = Position::new(h.x / h.z, h.y / h.z);
    pos.in_range().then_some(pos)
}

/// Projects a random point cloud through two cameras and mixes in uniformly
/// random outlier pairs (at least [`OUTLIER_MARGIN`] from the true geometry). Inlier positions are exact (not quantized), so the
/// returned `fundamental` fits them to rounding error.
pub fn gen_epipolar_pairs(seed: u64, n_inliers: usize, n_outliers: usize) -> Result<EpipolarPairs> {
    if n_inliers < 8 {
        return Err(invalid(format!(
            "epipolar generator needs at least 8 inliers, got {n_inliers}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Matrix3::new(FOCAL, 0.0, CENTER, 0.0, FOCAL, CENTER, 0.0, 0.0, 1.0);
    let k_inv = k.try_inverse().expect("intrinsics are invertible");

    let rot = Rotation3::from_euler_angles(
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
    );
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let t = Vector3::new(
        side,
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    )
    .normalize()
        * BASELINE;
    let r = *rot.matrix();
    let fundamental = {
        let f = k_inv.transpose() * skew(&t) * r * k_inv;
        f / f.norm()
    };

    let mut pairs = Vec::with_capacity(n_inliers + n_outliers);
    while pairs.len() < n_inliers {
        let z = rng.random_range(DEPTH_RANGE.0..DEPTH_RANGE.1);
        let p1 = Vector3::new(
            rng.random_range(-1.0..1.0) * z,
            rng.random_range(-1.0..1.0) * z,
            z,
        );
        let p2 = r * p1 + t;
        if let (Some(a), Some(b)) = (project(&k, &p1), project(&k, &p2)) {
            pairs.push((a, b, true));
        }
    }
    while pairs.len() < n_inliers + n_outliers {
        let a = Position::new(
            rng.random_range(0.0..POSITION_RANGE),
            rng.random_range(0.0..POSITION_RANGE),
        );
        let b = Position::new(
            rng.random_range(0.0..POSITION_RANGE),
            rng.random_range(0.0..POSITION_RANGE),
        );
        // A random pair can land on its epipolar line by chance; such a pair
        // is geometrically an inlier, so it is redrawn to keep labels honest.
        if sampson_distance(&fundamental, a, b) >= OUTLIER_MARGIN {
            pairs.push((a, b, false));
        }
    }
    pairs.shuffle(&mut rng);

    Ok(EpipolarPairs {
        db: pairs.iter().map(|p| p.0).collect(),
        query: pairs.iter().map(|p| p.1).collect(),
        inlier: pairs.iter().map(|p| p.2).collect(),
        fundamental,
    })
}

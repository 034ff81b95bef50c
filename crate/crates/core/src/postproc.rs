//! Dense map → sparse local features.
//!
//! Keypoints are the strict local maxima of the attention map in a 3×3
//! window. Around each one the dense descriptors are pooled over a `d × d`
//! window, flattened, compressed with PCA and L2-normalized. Grid cells map
//! to normalized positions through their centers.
//!
//! [`softmax_normalize`] and [`global_descriptor`] reproduce the attention
//! weighting used while training the backbone; they are diagnostics here and
//! not part of the inference path.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{invalid, Result, VprError};
use crate::model::{DenseFeatureMap, ImageFeatureSet, Position, POSITION_RANGE};

/// Softmax over every cell of the map.
pub fn softmax_normalize(attention: &Array2<f64>) -> Result<Array2<f64>> {
    if attention.is_empty() {
        return Err(VprError::Empty("attention map"));
    }
    if attention.iter().any(|v| !v.is_finite()) {
        return Err(invalid("attention map contains non-finite values"));
    }
    let max = attention.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = attention.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    Ok(exp / sum)
}

/// Attention-weighted sum of the dense descriptors, one value per channel.
pub fn global_descriptor(dense: &DenseFeatureMap, weights: &Array2<f64>) -> Result<Array1<f64>> {
    let (h, w, c) = dense.values().dim();
    if weights.dim() != (h, w) {
        return Err(VprError::DimensionMismatch {
            expected: h * w,
            found: weights.len(),
        });
    }
    let flat = dense
        .values()
        .view()
        .into_shape_with_order((h * w, c))
        .expect("standard layout");
    let s = weights
        .view()
        .into_shape_with_order(h * w)
        .expect("standard layout");
    Ok(flat.t().dot(&s))
}

/// A detected attention maximum on the dense grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub y: usize,
    pub x: usize,
    pub attention: f64,
}

/// Strict 3×3 non-maximum suppression.
///
/// A cell survives only if it is strictly greater than every neighbour that
/// exists, so plateaus produce nothing. Output is sorted by attention
/// (descending, then row-major position) and truncated to `max_features`.
pub fn nms_detect(attention: &Array2<f64>, max_features: Option<usize>) -> Vec<Keypoint> {
    let (h, w) = attention.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = attention[[y, x]];
            let is_peak = (y.saturating_sub(1)..(y + 2).min(h)).all(|ny| {
                (x.saturating_sub(1)..(x + 2).min(w))
                    .all(|nx| (ny == y && nx == x) || v > attention[[ny, nx]])
            });
            if is_peak {
                out.push(Keypoint { y, x, attention: v });
            }
        }
    }
    out.sort_by(|a, b| {
        b.attention
            .total_cmp(&a.attention)
            .then((a.y, a.x).cmp(&(b.y, b.x)))
    });
    if let Some(max) = max_features {
        out.truncate(max);
    }
    out
}

/// Flattens the `d × d × C` window centered on each keypoint, row-major over
/// (dy, dx, c). Keypoints whose window leaves the map are dropped.
pub fn extract_patch_descriptors(
    dense: &DenseFeatureMap,
    keypoints: &[Keypoint],
    d: usize,
) -> Result<Vec<(Keypoint, Vec<f64>)>> {
    if d == 0 || d.is_multiple_of(2) {
        return Err(invalid(format!(
            "patch size must be odd and positive, got {d}"
        )));
    }
    let r = d / 2;
    let (h, w, _) = dense.values().dim();
    let values = dense.values();
    Ok(keypoints
        .iter()
        .filter(|k| k.y >= r && k.x >= r && k.y + r < h && k.x + r < w)
        .map(|k| {
            let window = values.slice(ndarray::s![k.y - r..=k.y + r, k.x - r..=k.x + r, ..]);
            (*k, window.iter().copied().collect())
        })
        .collect())
}

/// A fitted PCA projection with orthonormal component rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    components: Array2<f64>,
    explained_variance: Vec<f64>,
}

impl PcaModel {
    /// Assembles a model from stored parts (explained variances are not
    /// persisted).
    pub fn from_parts(mean: Vec<f64>, components: Array2<f64>) -> Result<Self> {
        if components.ncols() != mean.len() {
            return Err(VprError::DimensionMismatch {
                expected: mean.len(),
                found: components.ncols(),
            });
        }
        if components.nrows() == 0 {
            return Err(invalid("PCA model needs at least one component"));
        }
        Ok(Self {
            mean,
            components,
            explained_variance: Vec::new(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.mean.len()
    }

    pub fn d_out(&self) -> usize {
        self.components.nrows()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `d_out × d_in`, one principal direction per row.
    pub fn components(&self) -> &Array2<f64> {
        &self.components
    }

    /// Variance along each component, non-increasing. Empty for loaded models.
    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// `components · (x − mean)` without normalization.
    pub fn project(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.d_in() {
            return Err(VprError::DimensionMismatch {
                expected: self.d_in(),
                found: x.len(),
            });
        }
        let centered = &x - &ArrayView1::from(&self.mean);
        Ok(self.components.dot(&centered))
    }

    /// Reconstructs an input vector from an (unnormalized) projection.
    pub fn reconstruct(&self, y: ArrayView1<f64>) -> Array1<f64> {
        self.components.t().dot(&y) + ArrayView1::from(&self.mean)
    }
}

/// Fits `d_out` principal directions to the sample rows.
///
/// Uses the covariance matrix when samples outnumber dimensions and the Gram
/// matrix otherwise, which keeps the eigenproblem at `min(n, d_in)`. Each
/// component is signed so its largest-magnitude entry is positive.
pub fn pca_fit(samples: &[Vec<f64>], d_out: usize) -> Result<PcaModel> {
    let n = samples.len();
    let d_in = samples.first().map_or(0, Vec::len);
    if n == 0 || d_in == 0 {
        return Err(VprError::Empty("PCA samples"));
    }
    if d_out == 0 || d_out > (n - 1).min(d_in) {
        return Err(invalid(format!(
            "d_out = {d_out} must be in 1..={} for {n} samples of dimension {d_in}",
            (n - 1).min(d_in)
        )));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != d_in) {
        return Err(VprError::DimensionMismatch {
            expected: d_in,
            found: bad.len(),
        });
    }

    let mut mean = vec![0.0; d_in];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d_in, |i, j| samples[i][j] - mean[j]);
    let scale = 1.0 / (n - 1) as f64;

    let (mut dirs, variances): (Vec<Vec<f64>>, Vec<f64>) = if n > d_in {
        let cov = centered.transpose() * &centered * scale;
        let eig = SymmetricEigen::new(cov);
        sorted_eigen(&eig)
            .into_iter()
            .take(d_out)
            .map(|(val, k)| (eig.eigenvectors.column(k).iter().copied().collect(), val))
            .unzip()
    } else {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
        sorted_eigen(&eig)
            .into_iter()
            .take(d_out)
            .map(|(val, k)| {
                // v = Xᵀu / √λ; directions with no variance are filled in below.
                if val <= top * 1e-12 {
                    return (Vec::new(), 0.0);
                }
                let v = centered.transpose() * eig.eigenvectors.column(k) / val.sqrt();
                (v.iter().copied().collect(), val * scale)
            })
            .unzip()
    };

    orthonormalize(&mut dirs, d_in);
    for dir in &mut dirs {
        let lead = dir
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| {
                if v.abs() > best.1.abs() {
                    (i, v)
                } else {
                    best
                }
            })
            .1;
        if lead < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
    }

    let components = Array2::from_shape_vec((d_out, d_in), dirs.concat()).expect("d_out rows");
    Ok(PcaModel {
        mean,
        components,
        explained_variance: variances.into_iter().map(|v| v.max(0.0)).collect(),
    })
}

/// Eigenvalue/index pairs, largest first, ties broken by index.
fn sorted_eigen(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> Vec<(f64, usize)> {
    let mut order: Vec<(f64, usize)> = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .map(|(k, v)| (v, k))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    order
}

/// Modified Gram-Schmidt over the rows. Empty rows (and rows that collapse)
/// are replaced by the first standard basis vector that is still independent.
fn orthonormalize(rows: &mut [Vec<f64>], dim: usize) {
    let mut basis_candidate = 0;
    for i in 0..rows.len() {
        loop {
            if rows[i].is_empty() {
                rows[i] = (0..dim).map(|j| f64::from(j == basis_candidate)).collect();
                basis_candidate += 1;
            }
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let prev = rows[j].clone();
                rows[i]
                    .iter_mut()
                    .zip(&prev)
                    .for_each(|(a, b)| *a -= dot * b);
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                rows[i].iter_mut().for_each(|v| *v /= norm);
                break;
            }
            rows[i].clear();
        }
    }
}

/// One PCA output: the normalized projection, or zeros when the input sat
/// exactly on the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub values: Vec<f64>,
    pub zero: bool,
}

/// Projects and L2-normalizes each vector.
pub fn pca_apply(model: &PcaModel, vectors: &[Vec<f64>]) -> Result<Vec<Projection>> {
    vectors
        .iter()
        .map(|v| {
            let y = model.project(ArrayView1::from(v))?;
            let norm = y.dot(&y).sqrt();
            Ok(if norm > 0.0 {
                Projection {
                    values: (y / norm).to_vec(),
                    zero: false,
                }
            } else {
                log::warn!("PCA input equals the model mean; projecting to zero");
                Projection {
                    values: vec![0.0; model.d_out()],
                    zero: true,
                }
            })
        })
        .collect()
}

/// Grid cell → normalized position through the cell center.
pub fn grid_to_position(y: usize, x: usize, height: usize, width: usize) -> Position {
    Position::new(
        (x as f64 + 0.5) * POSITION_RANGE / width as f64,
        (y as f64 + 0.5) * POSITION_RANGE / height as f64,
    )
}

/// NMS → patch pooling → PCA for one dense map. Features whose projection
/// vanishes are dropped since they have no direction to compare.
pub fn build_feature_set(
    dense: &DenseFeatureMap,
    model: &PcaModel,
    d: usize,
    max_features: Option<usize>,
) -> Result<ImageFeatureSet> {
    let expected = d * d * dense.channels();
    if model.d_in() != expected {
        return Err(VprError::DimensionMismatch {
            expected,
            found: model.d_in(),
        });
    }
    let keypoints = nms_detect(dense.attention(), max_features);
    let patches = extract_patch_descriptors(dense, &keypoints, d)?;
    let (kps, vectors): (Vec<Keypoint>, Vec<Vec<f64>>) = patches.into_iter().unzip();
    let projected = pca_apply(model, &vectors)?;

    let (h, w) = (dense.height(), dense.width());
    let mut positions = Vec::with_capacity(kps.len());
    let mut rows = Vec::with_capacity(kps.len() * model.d_out());
    for (k, p) in kps.iter().zip(projected) {
        if p.zero {
            continue;
        }
        positions.push(grid_to_position(k.y, k.x, h, w));
        rows.extend(p.values);
    }
    let descriptors = Array2::from_shape_vec((positions.len(), model.d_out()), rows)
        .expect("one row per kept keypoint");
    ImageFeatureSet::new(dense.id.clone(), positions, descriptors)
}

/// Patch vectors for PCA fitting, gathered from several maps.
pub fn collect_patch_samples(
    maps: &[DenseFeatureMap],
    d: usize,
    max_features: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let mut samples = Vec::new();
    for m in maps {
        let kps = nms_detect(m.attention(), max_features);
        samples.extend(
            extract_patch_descriptors(m, &kps, d)?
                .into_iter()
                .map(|(_, v)| v),
        );
    }
    Ok(samples)
}

/// Mean over all cells, used as a check on [`global_descriptor`].
#[doc(hidden)]
pub fn channel_mean(dense: &DenseFeatureMap) -> Array1<f64> {
    let (h, w, c) = dense.values().dim();
    dense
        .values()
        .view()
        .into_shape_with_order((h * w, c))
        .expect("standard layout")
        .mean_axis(Axis(0))
        .expect("non-empty")
}

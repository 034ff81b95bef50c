//! Two-stage retrieval.
//!
//! Stage one ranks the database by holistic cosine and keeps the top `K`.
//! Stage two re-scores those candidates with a local-feature re-ranker.
//! Candidates come first, ordered by their new score; the rest of the
//! database follows in holistic order with scores pushed below every
//! candidate, so each query yields a total order over the whole database.
//!
//! Rankings break score ties by ascending database id.

use std::borrow::Cow;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VprError};
use crate::geometry::{score_ransac_matched, RansacParams};
use crate::hdc::holistic_topk;
use crate::lpg::{build_star_graphs, score_lpg_matched, GaussianKernel, StarGraphSet};
use crate::matching::{score_mm_rows, to_f32, Similarity, UnitDescriptors, UnitRows};
use crate::model::{ImageFeatureSet, RankedEntry, RetrievalResult, Stage};

/// Local-feature re-ranker and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum RerankerChoice {
    Mm,
    Lpg {
        sigma: f64,
        h: f64,
        /// Evaluate the Gaussian directly instead of through the table.
        exact: bool,
    },
    Ransac {
        #[serde(flatten)]
        params: RansacParams,
        seed: u64,
    },
}

impl RerankerChoice {
    pub fn lpg_default() -> Self {
        Self::Lpg {
            sigma: crate::lpg::DEFAULT_SIGMA,
            h: crate::lpg::DEFAULT_H,
            exact: false,
        }
    }

    pub fn ransac_default() -> Self {
        Self::Ransac {
            params: RansacParams::default(),
            seed: 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Mm => "mm",
            Self::Lpg { .. } => "lpg",
            Self::Ransac { .. } => "ransac",
        }
    }
}

/// A database store prepared for querying: images with row-normalized
/// descriptors (normalized in place to avoid a second f64 copy of the
/// largest array) and their f32 rounding for fast matching, the holistic
/// matrix when every image has one, and optionally cached star graphs.
#[derive(Debug, Clone)]
pub struct Database {
    images: Vec<ImageFeatureSet>,
    fast: Vec<Array2<f32>>,
    holistic: Option<Array2<f64>>,
    graphs: Option<Vec<StarGraphSet>>,
}

impl Database {
    pub fn new(mut images: Vec<ImageFeatureSet>) -> Result<Self> {
        images
            .par_iter_mut()
            .try_for_each(ImageFeatureSet::normalize_descriptors)?;
        let fast = images.par_iter().map(|i| to_f32(i.descriptors())).collect();
        let holistic = match images.first().and_then(|i| i.holistic()) {
            Some(first) if images.iter().all(|i| i.holistic().is_some()) => {
                let dim = first.len();
                let mut flat = Vec::with_capacity(images.len() * dim);
                for img in &images {
                    let h = img.holistic().expect("checked above");
                    if h.len() != dim {
                        return Err(VprError::DimensionMismatch {
                            expected: dim,
                            found: h.len(),
                        });
                    }
                    flat.extend_from_slice(h);
                }
                Some(Array2::from_shape_vec((images.len(), dim), flat).expect("dim per row"))
            }
            _ => None,
        };
        Ok(Self {
            images,
            fast,
            holistic,
            graphs: None,
        })
    }

    /// Attaches precomputed star graphs (one set per image, in store order).
    pub fn with_graphs(mut self, graphs: Vec<StarGraphSet>) -> Result<Self> {
        if graphs.len() != self.images.len() {
            return Err(VprError::Malformed(format!(
                "{} graph sets for {} database images",
                graphs.len(),
                self.images.len()
            )));
        }
        for (img, g) in self.images.iter().zip(&graphs) {
            if g.len() != img.len() {
                return Err(VprError::Malformed(format!(
                    "image {} has {} features but {} star graphs",
                    img.id(),
                    img.len(),
                    g.len()
                )));
            }
        }
        self.graphs = Some(graphs);
        Ok(self)
    }

    /// Builds and caches star graphs for window size `h`.
    pub fn build_graphs(&mut self, h: f64) -> Result<()> {
        self.graphs = Some(build_all_graphs(&self.images, h)?);
        Ok(())
    }

    pub fn images(&self) -> &[ImageFeatureSet] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn graphs(&self) -> Option<&[StarGraphSet]> {
        self.graphs.as_deref()
    }

    pub fn has_holistic(&self) -> bool {
        self.holistic.is_some()
    }
}

pub fn build_all_graphs(images: &[ImageFeatureSet], h: f64) -> Result<Vec<StarGraphSet>> {
    images
        .par_iter()
        .map(|img| build_star_graphs(img, h))
        .collect()
}

/// A query image with its unit descriptors and its position in the query
/// list (used to derive per-pair RANSAC seeds).
#[derive(Debug, Clone)]
pub struct PreparedQuery<'a> {
    pub index: usize,
    pub set: &'a ImageFeatureSet,
    unit: UnitDescriptors,
}

impl<'a> PreparedQuery<'a> {
    pub fn new(index: usize, set: &'a ImageFeatureSet) -> Result<Self> {
        Ok(Self {
            index,
            set,
            unit: UnitDescriptors::of(set)?,
        })
    }
}

/// Scores query/database pairs with one re-ranker.
#[derive(Debug)]
pub struct Retriever<'a> {
    db: &'a Database,
    choice: RerankerChoice,
    kernel: Option<GaussianKernel>,
    graphs: Option<Cow<'a, [StarGraphSet]>>,
}

impl<'a> Retriever<'a> {
    /// For LPG, cached graphs are used when their window size matches;
    /// otherwise they are built here.
    pub fn new(db: &'a Database, choice: RerankerChoice) -> Result<Self> {
        let (kernel, graphs) = match &choice {
            RerankerChoice::Lpg { sigma, h, exact } => {
                let kernel = if *exact {
                    GaussianKernel::exact(*sigma)?
                } else {
                    GaussianKernel::lut(*sigma)?
                };
                let graphs = match db.graphs() {
                    Some(g) if g.iter().all(|s| s.h() as f32 == *h as f32) => Cow::Borrowed(g),
                    _ => Cow::Owned(build_all_graphs(db.images(), *h)?),
                };
                (Some(kernel), Some(graphs))
            }
            RerankerChoice::Ransac { params, .. } => {
                params.validate()?;
                (None, None)
            }
            RerankerChoice::Mm => (None, None),
        };
        Ok(Self {
            db,
            choice,
            kernel,
            graphs,
        })
    }

    pub fn database(&self) -> &Database {
        self.db
    }

    pub fn choice(&self) -> &RerankerChoice {
        &self.choice
    }

    /// Local-feature similarity between a query and database image `db_index`.
    pub fn score(&self, q: &PreparedQuery, db_index: usize) -> Result<Similarity> {
        let db_img = &self.db.images[db_index];
        let db_rows = UnitRows::new(db_img.descriptors(), self.db.fast[db_index].view())?;
        let (mm, matches) = score_mm_rows(db_rows, q.unit.rows())?;
        if mm.degenerate {
            return Ok(mm);
        }
        match &self.choice {
            RerankerChoice::Mm => Ok(mm),
            RerankerChoice::Lpg { .. } => score_lpg_matched(
                &self.graphs.as_ref().expect("built for LPG")[db_index],
                db_img.positions(),
                q.set.positions(),
                &matches,
                self.kernel.as_ref().expect("built for LPG"),
            ),
            RerankerChoice::Ransac { params, seed } => score_ransac_matched(
                db_img.positions(),
                q.set.positions(),
                &matches,
                params,
                pair_seed(*seed, q.index, db_index, self.db.len()),
            ),
        }
    }
}

/// Per-pair RANSAC seed: base seed xor the flat pair index.
pub fn pair_seed(seed: u64, query_index: usize, db_index: usize, db_len: usize) -> u64 {
    seed ^ (query_index as u64)
        .wrapping_mul(db_len as u64)
        .wrapping_add(db_index as u64)
}

fn sort_by_score_then_id(db: &Database, scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| db.images[a.0].id().cmp(db.images[b.0].id()))
    });
}

fn entries(db: &Database, scored: &[(usize, f64)], stage: Stage) -> Vec<RankedEntry> {
    scored
        .iter()
        .map(|&(i, score)| RankedEntry {
            db_id: db.images[i].id().to_owned(),
            score,
            stage,
        })
        .collect()
}

/// Scores every database image with the re-ranker.
pub fn exhaustive_query(r: &Retriever, q: &PreparedQuery) -> Result<RetrievalResult> {
    if r.db.is_empty() {
        return Err(VprError::Empty("database"));
    }
    let mut scored = (0..r.db.len())
        .map(|i| Ok((i, r.score(q, i)?.value)))
        .collect::<Result<Vec<_>>>()?;
    sort_by_score_then_id(r.db, &mut scored);
    Ok(RetrievalResult {
        query_id: q.set.id().to_owned(),
        ranking: entries(r.db, &scored, Stage::Reranked),
    })
}

fn holistic_order(db: &Database, q: &ImageFeatureSet) -> Result<Vec<(usize, f64)>> {
    let matrix = db
        .holistic
        .as_ref()
        .ok_or_else(|| VprError::MissingHolistic("database".into()))?;
    let qh = q
        .holistic()
        .ok_or_else(|| VprError::MissingHolistic(q.id().to_owned()))?;
    holistic_topk(qh, matrix.view(), db.len())
}

/// Stage one only: the whole database ranked by holistic cosine.
pub fn holistic_query(db: &Database, q: &ImageFeatureSet) -> Result<RetrievalResult> {
    let order = holistic_order(db, q)?;
    Ok(RetrievalResult {
        query_id: q.id().to_owned(),
        ranking: entries(db, &order, Stage::Holistic),
    })
}

/// Holistic top-`k_top` selection followed by re-ranking.
pub fn hierarchical_query(
    r: &Retriever,
    q: &PreparedQuery,
    k_top: usize,
) -> Result<RetrievalResult> {
    if k_top == 0 {
        return Err(invalid("K_top must be at least 1"));
    }
    let order = holistic_order(r.db, q.set)?;
    let k = k_top.min(order.len());
    let mut candidates = order[..k]
        .iter()
        .map(|&(i, _)| Ok((i, r.score(q, i)?.value)))
        .collect::<Result<Vec<_>>>()?;
    sort_by_score_then_id(r.db, &mut candidates);

    let floor = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let rest: Vec<(usize, f64)> = order[k..]
        .iter()
        .enumerate()
        .map(|(rank, &(i, _))| (i, floor - 1.0 - rank as f64))
        .collect();

    let mut ranking = entries(r.db, &candidates, Stage::Reranked);
    ranking.extend(entries(r.db, &rest, Stage::Holistic));
    Ok(RetrievalResult {
        query_id: q.set.id().to_owned(),
        ranking,
    })
}

/// How a batch of queries is answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum QueryMode {
    Exhaustive,
    Hierarchical { k_top: usize },
    Holistic,
}

/// Answers every query, in parallel on the current rayon pool. Output order
/// follows the input order.
pub fn run_queries(
    r: &Retriever,
    queries: &[ImageFeatureSet],
    mode: QueryMode,
) -> Result<Vec<RetrievalResult>> {
    queries
        .par_iter()
        .enumerate()
        .map(|(index, set)| match mode {
            QueryMode::Holistic => holistic_query(r.db, set),
            QueryMode::Exhaustive => exhaustive_query(r, &PreparedQuery::new(index, set)?),
            QueryMode::Hierarchical { k_top } => {
                hierarchical_query(r, &PreparedQuery::new(index, set)?, k_top)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LocalFeature, Position};
    use crate::synthetic::{gen_world, WorldConfig};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_world(seed: u64) -> crate::synthetic::World {
        gen_world(&WorldConfig {
            seed,
            db_size: 10,
            query_size: 4,
            features_per_image: 20,
            d_loc: 16,
            descriptor_noise: 0.3,
            position_jitter: 0.5,
            outlier_fraction: 0.2,
        })
        .unwrap()
    }

    #[test]
    fn exhaustive_ranks_exact_copy_first() {
        let mut w = small_world(1);
        let copy = w.db[3].clone();
        let db = Database::new(std::mem::take(&mut w.db)).unwrap();
        for choice in [RerankerChoice::Mm, RerankerChoice::lpg_default()] {
            let r = Retriever::new(&db, choice).unwrap();
            let res = exhaustive_query(&r, &PreparedQuery::new(0, &copy).unwrap()).unwrap();
            assert_eq!(res.ranking[0].db_id, copy.id());
            assert_abs_diff_eq!(res.ranking[0].score, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn exhaustive_order_equals_sorted_scores() {
        let w = small_world(2);
        let db = Database::new(w.db.clone()).unwrap();
        let r = Retriever::new(&db, RerankerChoice::lpg_default()).unwrap();
        let q = PreparedQuery::new(1, &w.queries[1]).unwrap();
        let res = exhaustive_query(&r, &q).unwrap();
        let mut oracle: Vec<(String, f64)> = (0..db.len())
            .map(|i| {
                (
                    db.images()[i].id().to_owned(),
                    r.score(&q, i).unwrap().value,
                )
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got: Vec<_> = res
            .ranking
            .iter()
            .map(|e| (e.db_id.clone(), e.score))
            .collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn empty_query_scores_zero_in_id_order() {
        let w = small_world(3);
        let db = Database::new(w.db.clone()).unwrap();
        let r = Retriever::new(&db, RerankerChoice::Mm).unwrap();
        let empty = ImageFeatureSet::empty("nothing", 16);
        let res = exhaustive_query(&r, &PreparedQuery::new(0, &empty).unwrap()).unwrap();
        assert!(res.ranking.iter().all(|e| e.score == 0.0));
        let ids: Vec<_> = res.ids().collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    fn with_holistic(w: &crate::synthetic::World) -> (Vec<ImageFeatureSet>, Vec<ImageFeatureSet>) {
        let cb = crate::hdc::hdc_init(7, 512, 5, 9, 16).unwrap();
        let agg = |sets: &[ImageFeatureSet]| {
            sets.iter()
                .map(|s| s.clone().with_holistic(cb.aggregate(s).unwrap().values))
                .collect::<Vec<_>>()
        };
        (agg(&w.db), agg(&w.queries))
    }

    #[test]
    fn full_candidate_set_equals_exhaustive() {
        let w = small_world(4);
        let (dbs, qs) = with_holistic(&w);
        let db = Database::new(dbs).unwrap();
        for choice in [
            RerankerChoice::Mm,
            RerankerChoice::lpg_default(),
            RerankerChoice::ransac_default(),
        ] {
            let r = Retriever::new(&db, choice).unwrap();
            for (i, q) in qs.iter().enumerate() {
                let pq = PreparedQuery::new(i, q).unwrap();
                assert_eq!(
                    hierarchical_query(&r, &pq, db.len()).unwrap(),
                    exhaustive_query(&r, &pq).unwrap()
                );
            }
        }
    }

    #[test]
    fn single_candidate_keeps_holistic_top1() {
        let w = small_world(5);
        let (dbs, qs) = with_holistic(&w);
        let db = Database::new(dbs).unwrap();
        let r = Retriever::new(&db, RerankerChoice::lpg_default()).unwrap();
        for (i, q) in qs.iter().enumerate() {
            let hol = holistic_query(&db, q).unwrap();
            let res = hierarchical_query(&r, &PreparedQuery::new(i, q).unwrap(), 1).unwrap();
            assert_eq!(res.ranking[0].db_id, hol.ranking[0].db_id);
            assert_eq!(res.ranking[0].stage, Stage::Reranked);
            assert!(res.ranking[1..].iter().all(|e| e.stage == Stage::Holistic));
            // Tail keeps holistic order and is strictly decreasing.
            let tail: Vec<_> = res.ids().skip(1).collect();
            let hol_tail: Vec<_> = hol.ids().skip(1).collect();
            assert_eq!(tail, hol_tail);
            assert!(res.ranking.windows(2).all(|w| w[0].score > w[1].score));
        }
    }

    #[test]
    fn reranking_lifts_a_planted_match_from_rank_40() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let d = 24;
        let mut rand_set = |id: String| {
            let feats = (0..15)
                .map(|_| {
                    LocalFeature::new(
                        Position::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)),
                        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                })
                .collect();
            ImageFeatureSet::from_features(id, feats).unwrap()
        };
        let query_feats = rand_set("q".into());
        let mut images: Vec<ImageFeatureSet> =
            (0..120).map(|i| rand_set(format!("db{i:03}"))).collect();
        // Holistic cosines fall with the index; the true match sits at index 39.
        let truth = 39;
        images[truth] = ImageFeatureSet::new(
            format!("db{truth:03}"),
            query_feats.positions().to_vec(),
            query_feats.descriptors().to_owned(),
        )
        .unwrap();
        let images = images
            .into_iter()
            .enumerate()
            .map(|(i, img)| {
                let c = 0.99 - 0.005 * i as f64;
                img.with_holistic(vec![c, (1.0 - c * c).sqrt()])
            })
            .collect();
        let query = query_feats.with_holistic(vec![1.0, 0.0]);
        let db = Database::new(images).unwrap();
        let r = Retriever::new(&db, RerankerChoice::lpg_default()).unwrap();
        let pq = PreparedQuery::new(0, &query).unwrap();
        assert_eq!(
            holistic_query(&db, &query).unwrap().ranking[truth].db_id,
            "db039"
        );
        let res = hierarchical_query(&r, &pq, 100).unwrap();
        assert_eq!(res.ranking[0].db_id, "db039");
        // Candidate set is preserved.
        let mut cands: Vec<_> = res.ranking[..100].iter().map(|e| e.db_id.clone()).collect();
        cands.sort();
        let mut expected: Vec<_> = (0..100).map(|i| format!("db{i:03}")).collect();
        expected.sort();
        assert_eq!(cands, expected);
    }

    #[test]
    fn missing_holistic_is_an_error() {
        let w = small_world(6);
        let db = Database::new(w.db.clone()).unwrap();
        let r = Retriever::new(&db, RerankerChoice::Mm).unwrap();
        let q = PreparedQuery::new(0, &w.queries[0]).unwrap();
        assert!(matches!(
            hierarchical_query(&r, &q, 3),
            Err(VprError::MissingHolistic(_))
        ));
    }

    #[test]
    fn graph_cache_is_validated() {
        let w = small_world(7);
        let db = Database::new(w.db.clone()).unwrap();
        let graphs = build_all_graphs(&w.db[..3], 60.0).unwrap();
        assert!(db.clone().with_graphs(graphs).is_err());
        let graphs = build_all_graphs(&w.db, 60.0).unwrap();
        assert!(db.with_graphs(graphs).unwrap().graphs().is_some());
    }
}

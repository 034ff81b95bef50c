//! Metrics, parameter sweeps and the comparison-time benchmark.
//!
//! PR-AUC pools every (query, database) pair into one ranking, sorted by
//! score descending with ties broken by `(query_id, db_id)` ascending.
//! Every prefix of that ranking contributes one (precision, recall) point.
//! The curve starts at recall 0 with the first prefix's precision and is
//! integrated with the trapezoid rule over recall.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VprError};
use crate::model::{GroundTruth, ImageFeatureSet, RetrievalResult};
use crate::retrieval::{
    hierarchical_query, run_queries, Database, PreparedQuery, QueryMode, RerankerChoice, Retriever,
};

/// One scored (query, database) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub query_id: String,
    pub db_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// The recall-0 anchor followed by one point per prefix.
    pub points: Vec<PrPoint>,
    pub auc: f64,
    pub positives: usize,
    pub pairs: usize,
}

impl PrCurve {
    /// Two whitespace-separated columns, `recall precision`, one point per line.
    pub fn to_gnuplot(&self) -> String {
        let mut out = String::from("# recall precision\n");
        for p in &self.points {
            let _ = writeln!(out, "{} {}", p.recall, p.precision);
        }
        out
    }
}

fn pair_order(a: &ScoredPair, b: &ScoredPair) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.query_id.cmp(&b.query_id))
        .then_with(|| a.db_id.cmp(&b.db_id))
}

/// PR curve and AUC over a pooled pair list. A pair is positive when the
/// ground truth lists its database id for its query; pairs of queries absent
/// from the ground truth count as negatives.
pub fn pr_auc(pairs: &[ScoredPair], gt: &GroundTruth) -> Result<PrCurve> {
    if pairs.iter().any(|p| p.score.is_nan()) {
        return Err(invalid("scores must not be NaN"));
    }
    let mut order: Vec<&ScoredPair> = pairs.iter().collect();
    order.sort_by(|a, b| pair_order(a, b));
    let labels: Vec<bool> = order
        .iter()
        .map(|p| gt.is_match(&p.query_id, &p.db_id))
        .collect();
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(VprError::NoPositives);
    }

    let total = positives as f64;
    let mut points = Vec::with_capacity(order.len() + 1);
    let first = f64::from(u8::from(labels[0]));
    points.push(PrPoint {
        precision: first,
        recall: 0.0,
    });
    let mut tp = 0usize;
    let mut auc = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        tp += usize::from(label);
        let p = PrPoint {
            precision: tp as f64 / (i + 1) as f64,
            recall: tp as f64 / total,
        };
        let prev = points.last().expect("anchor present");
        auc += (p.recall - prev.recall) * (p.precision + prev.precision) / 2.0;
        points.push(p);
    }
    Ok(PrCurve {
        points,
        auc,
        positives,
        pairs: order.len(),
    })
}

/// Flattens per-query rankings into scored pairs.
pub fn scored_pairs(results: &[RetrievalResult]) -> Vec<ScoredPair> {
    results
        .iter()
        .flat_map(|r| {
            r.ranking.iter().map(|e| ScoredPair {
                query_id: r.query_id.clone(),
                db_id: e.db_id.clone(),
                score: e.score,
            })
        })
        .collect()
}

pub fn pr_auc_from_results(results: &[RetrievalResult], gt: &GroundTruth) -> Result<PrCurve> {
    pr_auc(&scored_pairs(results), gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    /// Recall for each entry of `ks`.
    pub recall: Vec<f64>,
    /// Queries that had a ground-truth entry.
    pub evaluated: usize,
    /// Queries skipped because the ground truth does not mention them.
    pub excluded: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

/// Fraction of queries with at least one true match in their top `k`.
pub fn recall_at_k(
    results: &[RetrievalResult],
    gt: &GroundTruth,
    ks: &[usize],
) -> Result<RecallReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(invalid("recall cut-offs must be non-empty and >= 1"));
    }
    let mut hits = vec![0usize; ks.len()];
    let (mut evaluated, mut excluded) = (0usize, 0usize);
    for r in results {
        let Some(truth) = gt.get(&r.query_id) else {
            excluded += 1;
            continue;
        };
        evaluated += 1;
        if let Some(rank) = r.first_hit_rank(truth) {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if rank <= k {
                    *h += 1;
                }
            }
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} queries have no ground-truth entry and were excluded from recall");
    }
    if evaluated == 0 {
        return Err(VprError::Empty("queries with ground truth"));
    }
    Ok(RecallReport {
        ks: ks.to_vec(),
        recall: hits.iter().map(|&h| h as f64 / evaluated as f64).collect(),
        evaluated,
        excluded,
    })
}

/// Exhaustive-LPG AUC for every `(sigma, h)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub sigmas: Vec<f64>,
    pub hs: Vec<f64>,
    /// `auc[i][j]` belongs to `sigmas[i]`, `hs[j]`.
    pub auc: Vec<Vec<f64>>,
}

impl SweepGrid {
    pub fn best(&self) -> Option<(f64, f64, f64)> {
        let mut best: Option<(f64, f64, f64)> = None;
        for (i, row) in self.auc.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                if best.is_none_or(|b| a > b.2) {
                    best = Some((self.sigmas[i], self.hs[j], a));
                }
            }
        }
        best
    }
}

pub fn sweep_lpg(
    db: &Database,
    queries: &[ImageFeatureSet],
    gt: &GroundTruth,
    sigmas: &[f64],
    hs: &[f64],
    exact: bool,
) -> Result<SweepGrid> {
    if sigmas.is_empty() || hs.is_empty() {
        return Err(invalid("sweep grid axes must be non-empty"));
    }
    let mut auc = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut row = Vec::with_capacity(hs.len());
        for &h in hs {
            let r = Retriever::new(db, RerankerChoice::Lpg { sigma, h, exact })?;
            let results = run_queries(&r, queries, QueryMode::Exhaustive)?;
            row.push(pr_auc_from_results(&results, gt)?.auc);
        }
        auc.push(row);
    }
    Ok(SweepGrid {
        sigmas: sigmas.to_vec(),
        hs: hs.to_vec(),
        auc,
    })
}

/// Comparison time of one re-ranker configuration.
///
/// `total_seconds` is the sum of per-query times (holistic selection plus
/// re-ranking), averaged over repetitions. Loading stores, normalizing
/// query descriptors and building star graphs are not timed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub label: String,
    pub reranker: RerankerChoice,
    pub k_top: usize,
    pub db_size: usize,
    pub queries: usize,
    pub repetitions: usize,
    pub parallelism: usize,
    pub total_seconds: f64,
    /// Sample standard deviation of the per-repetition totals (0 for one
    /// repetition).
    pub total_seconds_std: f64,
    pub per_repetition_seconds: Vec<f64>,
    pub mean_query_ms: f64,
    pub pairs_per_second: f64,
    pub clock_resolution_ns: f64,
}

/// Smallest observable step of the monotonic clock.
pub fn clock_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let start = Instant::now();
        let mut now = Instant::now();
        while now == start {
            now = Instant::now();
        }
        best = best.min(now - start);
    }
    best
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Times hierarchical retrieval for each configuration.
///
/// Configurations are interleaved per query, and the order rotates with the
/// query index and repetition, so slow drift (thermal, frequency scaling)
/// spreads evenly over all of them. Queries run on a dedicated pool of
/// `parallelism` threads.
pub fn bench_compare(
    db: &Database,
    queries: &[ImageFeatureSet],
    k_top: usize,
    rerankers: &[RerankerChoice],
    repetitions: usize,
    parallelism: usize,
) -> Result<Vec<TimingReport>> {
    if rerankers.is_empty() || repetitions == 0 || parallelism == 0 || k_top == 0 {
        return Err(invalid(
            "bench needs at least one reranker, and repetitions, parallelism and K_top >= 1",
        ));
    }
    if queries.is_empty() {
        return Err(VprError::Empty("query store"));
    }
    let retrievers = rerankers
        .iter()
        .map(|c| Retriever::new(db, c.clone()))
        .collect::<Result<Vec<_>>>()?;
    let prepared = queries
        .iter()
        .enumerate()
        .map(|(i, q)| PreparedQuery::new(i, q))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| invalid(format!("cannot build thread pool: {e}")))?;

    let n_cfg = retrievers.len();
    let mut totals = vec![Vec::with_capacity(repetitions); n_cfg];
    for rep in 0..repetitions {
        let per_query: Vec<Vec<Duration>> = pool.install(|| {
            prepared
                .par_iter()
                .map(|q| {
                    let mut times = vec![Duration::ZERO; n_cfg];
                    for step in 0..n_cfg {
                        let c = (q.index + rep + step) % n_cfg;
                        let start = Instant::now();
                        let res = hierarchical_query(&retrievers[c], q, k_top)?;
                        times[c] = start.elapsed();
                        black_box(res);
                    }
                    Ok(times)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (c, total) in totals.iter_mut().enumerate() {
            total.push(per_query.iter().map(|t| t[c].as_secs_f64()).sum());
        }
    }

    let resolution = clock_resolution().as_secs_f64() * 1e9;
    let candidates = k_top.min(db.len());
    Ok(rerankers
        .iter()
        .zip(totals)
        .map(|(choice, reps)| {
            let (mean, std) = mean_std(&reps);
            TimingReport {
                label: choice.name().to_owned(),
                reranker: choice.clone(),
                k_top,
                db_size: db.len(),
                queries: queries.len(),
                repetitions,
                parallelism,
                total_seconds: mean,
                total_seconds_std: std,
                per_repetition_seconds: reps,
                mean_query_ms: mean * 1e3 / queries.len() as f64,
                pairs_per_second: (queries.len() * candidates) as f64 / mean,
                clock_resolution_ns: resolution,
            }
        })
        .collect())
}

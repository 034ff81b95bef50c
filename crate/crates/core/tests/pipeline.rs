//! End-to-end: dense maps to features to holistic descriptors to rankings.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpr_core::eval::{pr_auc_from_results, recall_at_k};
use vpr_core::hdc::hdc_init;
use vpr_core::postproc::{build_feature_set, collect_patch_samples, pca_fit};
use vpr_core::retrieval::{run_queries, Database, QueryMode, RerankerChoice, Retriever};
use vpr_core::synthetic::{gen_world, WorldConfig};
use vpr_core::{DenseFeatureMap, GroundTruth, ImageFeatureSet};

fn attach(sets: Vec<ImageFeatureSet>, d_loc: usize) -> Vec<ImageFeatureSet> {
    let cb = hdc_init(3, 1024, 5, 9, d_loc).unwrap();
    sets.into_iter()
        .map(|s| {
            let h = cb.aggregate(&s).unwrap().values;
            s.with_holistic(h)
        })
        .collect()
}

#[test]
fn zero_perturbation_world_ranks_every_source_first() {
    let w = gen_world(&WorldConfig {
        seed: 17,
        db_size: 30,
        query_size: 10,
        features_per_image: 40,
        d_loc: 32,
        ..Default::default()
    })
    .unwrap();
    let db = Database::new(attach(w.db, 32)).unwrap();
    let queries = attach(w.queries, 32);
    for choice in [
        RerankerChoice::Mm,
        RerankerChoice::lpg_default(),
        RerankerChoice::ransac_default(),
    ] {
        let r = Retriever::new(&db, choice.clone()).unwrap();
        for mode in [QueryMode::Exhaustive, QueryMode::Hierarchical { k_top: 5 }] {
            let res = run_queries(&r, &queries, mode).unwrap();
            let rec = recall_at_k(&res, &w.ground_truth, &[1]).unwrap();
            assert_eq!(rec.recall[0], 1.0, "{choice:?} {mode:?}");
            for q in &res {
                assert!((q.ranking[0].score - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn noisy_world_lpg_is_at_least_as_good_as_chance() {
    let w = gen_world(&WorldConfig {
        seed: 5,
        db_size: 25,
        query_size: 10,
        features_per_image: 50,
        d_loc: 32,
        descriptor_noise: 0.8,
        position_jitter: 2.0,
        outlier_fraction: 0.4,
    })
    .unwrap();
    let db = Database::new(attach(w.db, 32)).unwrap();
    let queries = attach(w.queries, 32);
    let r = Retriever::new(&db, RerankerChoice::lpg_default()).unwrap();
    let res = run_queries(&r, &queries, QueryMode::Hierarchical { k_top: 10 }).unwrap();
    let auc = pr_auc_from_results(&res, &w.ground_truth).unwrap().auc;
    // Chance level is 1/25.
    assert!(auc > 0.5, "auc {auc}");
}

/// Dense maps sharing a scene: each "place" has a fixed set of textured
/// peaks; the query copy is the same scene shifted by one cell.
fn dense_scene(
    rng: &mut ChaCha8Rng,
    id: String,
    peaks: &[(usize, usize)],
    texture: &Array3<f64>,
    shift: usize,
) -> DenseFeatureMap {
    let (h, w, c) = (24, 32, 6);
    let mut values = Array3::from_shape_fn((h, w, c), |_| rng.random_range(-0.05..0.05));
    let mut attention = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..0.1));
    for (k, &(y, x)) in peaks.iter().enumerate() {
        let x = x + shift;
        attention[[y, x]] = 1.0 + k as f64 * 0.01;
        for dy in 0..3 {
            for dx in 0..3 {
                for z in 0..c {
                    values[[y + dy - 1, x + dx - 1, z]] += texture[[k, dy * 3 + dx, z]];
                }
            }
        }
    }
    DenseFeatureMap::new(id, values, attention).unwrap()
}

#[test]
fn dense_maps_flow_through_the_whole_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n_places = 6;
    let mut db_maps = vec![];
    let mut q_maps = vec![];
    let mut gt = GroundTruth::new();
    for p in 0..n_places {
        let peaks: Vec<(usize, usize)> = (0..8)
            .map(|_| (rng.random_range(2..22), rng.random_range(2..28)))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .filter(|&(_, x)| x + 1 < 30)
            .collect();
        let texture = Array3::from_shape_fn((peaks.len(), 9, 6), |_| rng.random_range(-1.0..1.0));
        db_maps.push(dense_scene(&mut rng, format!("db{p}"), &peaks, &texture, 0));
        q_maps.push(dense_scene(&mut rng, format!("q{p}"), &peaks, &texture, 1));
        gt.insert(format!("q{p}"), format!("db{p}"));
    }
    let samples = collect_patch_samples(&db_maps, 3, Some(20)).unwrap();
    let model = pca_fit(&samples, 16).unwrap();
    let build = |maps: &[DenseFeatureMap]| -> Vec<ImageFeatureSet> {
        maps.iter()
            .map(|m| build_feature_set(m, &model, 3, Some(20)).unwrap())
            .collect()
    };
    let db = Database::new(attach(build(&db_maps), 16)).unwrap();
    let queries = attach(build(&q_maps), 16);
    let r = Retriever::new(&db, RerankerChoice::lpg_default()).unwrap();
    let res = run_queries(&r, &queries, QueryMode::Hierarchical { k_top: 3 }).unwrap();
    let rec = recall_at_k(&res, &gt, &[1]).unwrap();
    assert_eq!(rec.recall[0], 1.0);
}

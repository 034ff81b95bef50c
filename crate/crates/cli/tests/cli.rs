//! End-to-end runs of the `vpr` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{Array2, Array3};
use serde_json::Value;
use vpr_core::format::write_dense;
use vpr_core::DenseFeatureMap;

fn vpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vpr(args);
    assert!(
        out.status.success(),
        "vpr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// gen + aggregate for db and queries; returns (db, queries, gt) paths.
fn small_world(dir: &Path, noise: &str) -> (PathBuf, PathBuf, PathBuf) {
    let world = dir.join("world");
    ok(&[
        "gen",
        "--out-dir",
        p(&world),
        "--seed",
        "7",
        "--db-size",
        "20",
        "--query-size",
        "6",
        "--features",
        "30",
        "--d-loc",
        "16",
        "--noise",
        noise,
    ]);
    let db = dir.join("db_h.vprf");
    let q = dir.join("q_h.vprf");
    ok(&[
        "aggregate",
        "--input",
        p(&world.join("db.vprf")),
        "--output",
        p(&db),
        "--hdc-dim",
        "512",
    ]);
    ok(&[
        "aggregate",
        "--input",
        p(&world.join("queries.vprf")),
        "--output",
        p(&q),
        "--hdc-dim",
        "512",
    ]);
    (db, q, world.join("ground_truth.json"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn zero_noise_world_reaches_perfect_recall() {
    let dir = tempfile::tempdir().unwrap();
    let (db, q, gt) = small_world(dir.path(), "0");
    for reranker in ["mm", "lpg", "ransac"] {
        let res = dir.path().join(format!("{reranker}.jsonl"));
        let metrics = dir.path().join(format!("{reranker}.json"));
        ok(&[
            "retrieve",
            "--db",
            p(&db),
            "--queries",
            p(&q),
            "--output",
            p(&res),
            "--reranker",
            reranker,
            "--topk",
            "5",
        ]);
        let stdout = ok(&[
            "evaluate",
            "--results",
            p(&res),
            "--gt",
            p(&gt),
            "--output",
            p(&metrics),
            "--ks",
            "1,5",
        ]);
        assert!(stdout.contains("R@1 1.0000"), "{stdout}");
        let m = read_json(&metrics);
        assert_eq!(m["recall"][0]["recall"], 1.0);
        assert_eq!(m["manifest"]["subcommand"], "evaluate");
    }
}

#[test]
fn results_start_with_the_manifest_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (db, q, _) = small_world(dir.path(), "0.5");
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        ok(&[
            "retrieve",
            "--db",
            p(&db),
            "--queries",
            p(&q),
            "--output",
            p(&out),
            "--reranker",
            "ransac",
            "--threads",
            threads,
        ]);
        fs::read(out).unwrap()
    };
    let a = run("a.jsonl", "2");
    let b = run("b.jsonl", "2");
    let c = run("c.jsonl", "1");
    // Output paths differ, so compare everything after the manifest line.
    let body = |bytes: &[u8]| {
        let text = String::from_utf8(bytes.to_vec()).unwrap();
        let (first, rest) = text.split_once('\n').unwrap();
        let manifest: Value = serde_json::from_str(first).unwrap();
        (manifest["manifest"]["params"].clone(), rest.to_owned())
    };
    assert_eq!(body(&a), body(&b));
    assert_eq!(body(&a).1, body(&c).1);
    assert_eq!(body(&a).0["reranker"], "ransac");
    assert_eq!(body(&a).0["topk"], 100);

    // Identical invocations, identical bytes.
    let again = dir.path().join("a.jsonl");
    ok(&[
        "retrieve",
        "--db",
        p(&db),
        "--queries",
        p(&q),
        "--output",
        p(&again),
        "--reranker",
        "ransac",
        "--threads",
        "2",
    ]);
    assert_eq!(fs::read(&again).unwrap(), a);
}

#[test]
fn malformed_store_is_a_data_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.vprf");
    fs::write(&bad, b"VPRF\x01\x00\x00\x00garbage").unwrap();
    let out = dir.path().join("out.jsonl");
    let res = vpr(&[
        "retrieve",
        "--db",
        p(&bad),
        "--queries",
        p(&bad),
        "--output",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
    assert!(String::from_utf8_lossy(&res.stderr).contains("error"));

    let res = vpr(&[
        "graphs",
        "--input",
        p(&dir.path().join("missing.vprf")),
        "--output",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vpr(&["retrieve", "--nonsense"]).status.code(), Some(1));
    assert_eq!(vpr(&[]).status.code(), Some(1));
    assert_eq!(vpr(&["--help"]).status.code(), Some(0));

    let (db, q, _) = small_world(dir.path(), "0");
    let out = dir.path().join("r.jsonl");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"retrieve": {"no_such_key": 1}}"#).unwrap();
    let res = vpr(&[
        "--config",
        p(&cfg),
        "retrieve",
        "--db",
        p(&db),
        "--queries",
        p(&q),
        "--output",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let res = vpr(&[
        "retrieve",
        "--db",
        p(&db),
        "--queries",
        p(&q),
        "--output",
        p(&out),
        "--sigma",
        "-1",
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn config_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (db, q, _) = small_world(dir.path(), "0");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"retrieve": {"topk": 3, "reranker": "mm"}}"#).unwrap();
    let out = dir.path().join("r.jsonl");
    ok(&[
        "--config",
        p(&cfg),
        "retrieve",
        "--db",
        p(&db),
        "--queries",
        p(&q),
        "--output",
        p(&out),
        "--topk",
        "9",
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["manifest"]["params"]["topk"], 3);
    assert_eq!(first["manifest"]["params"]["reranker"], "mm");
    let second: Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    let stages: Vec<&str> = second["ranking"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["stage"].as_str().unwrap())
        .collect();
    assert_eq!(stages.iter().filter(|&&s| s == "reranked").count(), 3);
}

#[test]
fn graph_cache_sweep_and_bench_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (db, q, gt) = small_world(dir.path(), "0.5");
    let g = dir.path().join("db.vprg");
    ok(&["graphs", "--input", p(&db), "--output", p(&g)]);
    assert!(dir.path().join("db.vprg.manifest.json").exists());

    let cached = dir.path().join("cached.jsonl");
    let direct = dir.path().join("direct.jsonl");
    ok(&[
        "retrieve",
        "--db",
        p(&db),
        "--queries",
        p(&q),
        "--output",
        p(&cached),
        "--graphs",
        p(&g),
    ]);
    ok(&[
        "retrieve",
        "--db",
        p(&db),
        "--queries",
        p(&q),
        "--output",
        p(&direct),
    ]);
    let tail = |path: &Path| {
        fs::read_to_string(path)
            .unwrap()
            .split_once('\n')
            .unwrap()
            .1
            .to_owned()
    };
    assert_eq!(tail(&cached), tail(&direct));

    let grid = dir.path().join("grid.json");
    let csv = dir.path().join("grid.csv");
    ok(&[
        "sweep",
        "--db",
        p(&db),
        "--queries",
        p(&q),
        "--gt",
        p(&gt),
        "--output",
        p(&grid),
        "--csv",
        p(&csv),
        "--sigmas",
        "1,2",
        "--hs",
        "60",
    ]);
    let v = read_json(&grid);
    assert_eq!(v["auc"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);

    let report = dir.path().join("bench.json");
    let stdout = ok(&[
        "bench",
        "--db",
        p(&db),
        "--queries",
        p(&q),
        "--output",
        p(&report),
        "--topk",
        "5",
        "--repetitions",
        "2",
    ]);
    assert_eq!(stdout.lines().count(), 3);
    let v = read_json(&report);
    assert_eq!(v["manifest"]["parallelism"], 1);
    assert_eq!(v["reports"].as_array().unwrap().len(), 3);

    let curve = dir.path().join("pr.dat");
    let res = dir.path().join("r.jsonl");
    ok(&[
        "retrieve",
        "--db",
        p(&db),
        "--queries",
        p(&q),
        "--output",
        p(&res),
    ]);
    ok(&[
        "evaluate",
        "--results",
        p(&res),
        "--gt",
        p(&gt),
        "--output",
        p(&dir.path().join("m.json")),
        "--pr-curve",
        p(&curve),
    ]);
    // 20 × 6 pairs plus the recall-0 anchor and a header line.
    assert_eq!(fs::read_to_string(&curve).unwrap().lines().count(), 122);
}

/// Dense maps with a handful of textured attention peaks.
fn dense_maps(n: usize) -> Vec<DenseFeatureMap> {
    (0..n)
        .map(|i| {
            let (h, w, c) = (20, 24, 4);
            let values = Array3::from_shape_fn((h, w, c), |(y, x, z)| {
                ((y * 13 + x * 7 + z * 3 + i * 11) as f64 * 0.61).sin()
            });
            let attention = Array2::from_shape_fn((h, w), |(y, x)| {
                ((y as f64 * 0.9 + i as f64).sin() * (x as f64 * 0.7).cos()).abs()
            });
            DenseFeatureMap::new(format!("img{i}"), values, attention).unwrap()
        })
        .collect()
}

#[test]
fn postprocess_fits_pca_and_reuses_it() {
    let dir = tempfile::tempdir().unwrap();
    let dense = dir.path().join("maps.vprd");
    write_dense(&dense_maps(3), &dense).unwrap();
    let store = dir.path().join("f.vprf");
    let pca = dir.path().join("p.vprp");
    ok(&[
        "postprocess",
        "--input",
        p(&dense),
        "--output",
        p(&store),
        "--fit-pca",
        "--d-loc",
        "8",
        "--patch",
        "3",
        "--max-features",
        "20",
        "--pca-out",
        p(&pca),
    ]);
    let sets = vpr_core::format::read_store(&store).unwrap();
    assert_eq!(sets.len(), 3);
    assert!(sets
        .iter()
        .all(|s| !s.is_empty() && s.d_loc() == 8 && s.len() <= 20));

    let again = dir.path().join("g.vprf");
    ok(&[
        "postprocess",
        "--input",
        p(&dense),
        "--output",
        p(&again),
        "--pca",
        p(&pca),
        "--patch",
        "3",
        "--max-features",
        "20",
    ]);
    assert_eq!(vpr_core::format::read_store(&again).unwrap(), sets);

    // Neither or both PCA sources is a usage error.
    let res = vpr(&["postprocess", "--input", p(&dense), "--output", p(&again)]);
    assert_eq!(res.status.code(), Some(1));
    // Even patch size is rejected as a parameter error.
    let res = vpr(&[
        "postprocess",
        "--input",
        p(&dense),
        "--output",
        p(&dir.path().join("x.vprf")),
        "--fit-pca",
        "--patch",
        "4",
    ]);
    assert_eq!(res.status.code(), Some(1));
}

//! One function per subcommand.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use vpr_core::eval::{bench_compare, pr_auc_from_results, recall_at_k, sweep_lpg};
use vpr_core::format::{
    decode_pca, encode_graphs, encode_pca, encode_store, read_dense, read_graphs, read_pca,
    read_store,
};
use vpr_core::geometry::RansacParams;
use vpr_core::hdc::{attach_holistic, hdc_init};
use vpr_core::postproc::{build_feature_set, collect_patch_samples, pca_fit};
use vpr_core::retrieval::{
    build_all_graphs, run_queries, Database, QueryMode, RerankerChoice, Retriever,
};
use vpr_core::synthetic::{gen_world, WorldConfig};
use vpr_core::{GroundTruth, RetrievalResult};

use crate::args::*;
use crate::manifest::{
    write_csv, write_json, write_jsonl, write_text, write_with_sidecar, RunManifest,
};

/// A problem with how the tool was invoked rather than with the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub struct RunContext {
    pub config: Option<Value>,
    pub parallelism: usize,
}

pub fn load_config(path: Option<&Path>) -> Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(usage("config must be a JSON object"));
    }
    Ok(Some(value))
}

/// Overrides fields of `params` with the config's keys, either the section
/// named `section` or, when absent, the top-level object.
pub fn apply_config<T: Serialize + DeserializeOwned>(
    params: T,
    section: &str,
    config: Option<&Value>,
) -> Result<T> {
    let Some(config) = config else {
        return Ok(params);
    };
    let overrides = match config.get(section) {
        Some(Value::Object(o)) => o,
        _ => config.as_object().expect("checked when loading"),
    };
    let Value::Object(mut merged) = serde_json::to_value(&params)? else {
        unreachable!("parameter blocks serialize to objects")
    };
    for (k, v) in overrides {
        if !merged.contains_key(k) {
            return Err(usage(format!("unknown parameter `{k}` for `{section}`")));
        }
        merged.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| usage(format!("bad parameter value in config: {e}")))
}

pub fn run(cmd: Command, ctx: &RunContext) -> Result<()> {
    let name = cmd.name();
    let cfg = ctx.config.as_ref();
    match cmd {
        Command::Gen(c) => gen(&c.out_dir, apply_config(c.params, name, cfg)?, ctx),
        Command::Postprocess(c) => {
            let params = apply_config(c.params.clone(), name, cfg)?;
            postprocess(&c, params, ctx)
        }
        Command::Aggregate(c) => {
            aggregate(&c.input, &c.output, apply_config(c.params, name, cfg)?, ctx)
        }
        Command::Graphs(c) => graphs(&c.input, &c.output, apply_config(c.params, name, cfg)?, ctx),
        Command::Retrieve(c) => {
            let params = apply_config(c.params.clone(), name, cfg)?;
            retrieve(&c, params, ctx)
        }
        Command::Evaluate(c) => {
            let params = apply_config(c.params.clone(), name, cfg)?;
            evaluate(&c, params, ctx)
        }
        Command::Sweep(c) => {
            let params = apply_config(c.params.clone(), name, cfg)?;
            sweep(&c, params, ctx)
        }
        Command::Bench(c) => {
            let params = apply_config(c.params.clone(), name, cfg)?;
            bench(&c, params, ctx)
        }
    }
}

fn load_store(path: &Path) -> Result<Vec<vpr_core::ImageFeatureSet>> {
    read_store(path).with_context(|| format!("reading feature store {}", path.display()))
}

fn gen(out_dir: &Path, p: GenParams, ctx: &RunContext) -> Result<()> {
    let world = gen_world(&WorldConfig {
        seed: p.seed,
        db_size: p.db_size,
        query_size: p.query_size,
        features_per_image: p.features,
        d_loc: p.d_loc,
        descriptor_noise: p.noise,
        position_jitter: p.jitter,
        outlier_fraction: p.outliers,
    })?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let db_path = out_dir.join("db.vprf");
    let q_path = out_dir.join("queries.vprf");
    let gt_path = out_dir.join("ground_truth.json");
    let manifest = RunManifest::new("gen", &p, ctx.parallelism)?
        .output("db", &db_path)
        .output("queries", &q_path)
        .output("ground_truth", &gt_path);
    write_with_sidecar(&db_path, &encode_store(&world.db)?, &manifest)?;
    write_with_sidecar(&q_path, &encode_store(&world.queries)?, &manifest)?;
    let mut gt = world.ground_truth.to_json();
    gt.push('\n');
    write_with_sidecar(&gt_path, gt.as_bytes(), &manifest)?;
    log::info!(
        "wrote {} database and {} query images to {}",
        world.db.len(),
        world.queries.len(),
        out_dir.display()
    );
    Ok(())
}

fn postprocess(c: &PostprocessCmd, p: PostprocessParams, ctx: &RunContext) -> Result<()> {
    let maps = read_dense(&c.input)
        .with_context(|| format!("reading dense maps {}", c.input.display()))?;
    let mut manifest = RunManifest::new("postprocess", &p, ctx.parallelism)?
        .input("dense", &c.input)
        .output("store", &c.output);
    let model = match &c.pca {
        Some(path) => {
            manifest = manifest.input("pca", path);
            read_pca(path).with_context(|| format!("reading PCA model {}", path.display()))?
        }
        None => {
            let mut samples = collect_patch_samples(&maps, p.patch, Some(p.max_features))?;
            if let Some(cap) = p.pca_samples {
                if cap == 0 {
                    return Err(usage("--pca-samples must be at least 1"));
                }
                let stride = samples.len().div_ceil(cap).max(1);
                samples = samples.into_iter().step_by(stride).collect();
            }
            log::info!("fitting PCA on {} patches", samples.len());
            // Project with the model exactly as persisted (f32), so a later
            // run with `--pca` reproduces this store bit for bit.
            decode_pca(&encode_pca(&pca_fit(&samples, p.d_loc)?)?)?
        }
    };
    if let Some(path) = &c.pca_out {
        manifest = manifest.output("pca", path);
        write_with_sidecar(path, &encode_pca(&model)?, &manifest)?;
    }
    let sets = maps
        .par_iter()
        .map(|m| build_feature_set(m, &model, p.patch, Some(p.max_features)))
        .collect::<vpr_core::Result<Vec<_>>>()?;
    let empty = sets.iter().filter(|s| s.is_empty()).count();
    if empty > 0 {
        log::warn!("{empty} images produced no features");
    }
    write_with_sidecar(&c.output, &encode_store(&sets)?, &manifest)
}

fn aggregate(input: &Path, output: &Path, p: HdcParams, ctx: &RunContext) -> Result<()> {
    let mut sets = load_store(input)?;
    let Some(d_loc) = sets.first().map(|s| s.d_loc()) else {
        bail!(vpr_core::VprError::Empty("feature store"));
    };
    let cb = hdc_init(p.hdc_seed, p.hdc_dim, p.n_x, p.n_y, d_loc)?;
    let empty = attach_holistic(&cb, &mut sets)?;
    if empty > 0 {
        log::warn!("{empty} images have no features; their holistic descriptor is zero");
    }
    let manifest = RunManifest::new("aggregate", &p, ctx.parallelism)?
        .input("store", input)
        .output("store", output);
    write_with_sidecar(output, &encode_store(&sets)?, &manifest)
}

fn graphs(input: &Path, output: &Path, p: GraphParams, ctx: &RunContext) -> Result<()> {
    let sets = load_store(input)?;
    let graphs = build_all_graphs(&sets, p.h)?;
    let manifest = RunManifest::new("graphs", &p, ctx.parallelism)?
        .input("store", input)
        .output("graphs", output);
    write_with_sidecar(output, &encode_graphs(&graphs)?, &manifest)
}

fn reranker(kind: RerankerKind, lpg: &LpgParams, ransac: &RansacFlags) -> RerankerChoice {
    match kind {
        RerankerKind::Mm => RerankerChoice::Mm,
        RerankerKind::Lpg => RerankerChoice::Lpg {
            sigma: lpg.sigma,
            h: lpg.h,
            exact: lpg.lpg_exact,
        },
        RerankerKind::Ransac => RerankerChoice::Ransac {
            params: RansacParams {
                max_iterations: ransac.ransac_iters,
                inlier_threshold: ransac.ransac_tau,
                confidence: ransac.ransac_confidence,
                ..RansacParams::default()
            },
            seed: ransac.ransac_seed,
        },
    }
}

fn retrieve(c: &RetrieveCmd, p: RetrieveParams, ctx: &RunContext) -> Result<()> {
    if p.topk == 0 {
        return Err(usage("--topk must be at least 1"));
    }
    let mut db = Database::new(load_store(&c.db)?)?;
    let queries = load_store(&c.queries)?;
    let mut manifest = RunManifest::new("retrieve", &p, ctx.parallelism)?
        .input("db", &c.db)
        .input("queries", &c.queries)
        .output("results", &c.output);
    if let Some(path) = &c.graphs {
        let graphs =
            read_graphs(path).with_context(|| format!("reading star graphs {}", path.display()))?;
        db = db.with_graphs(graphs)?;
        manifest = manifest.input("graphs", path);
    }
    let choice = reranker(p.reranker, &p.lpg, &p.ransac);
    let r = Retriever::new(&db, choice)?;
    let mode = if p.exhaustive {
        QueryMode::Exhaustive
    } else {
        if !db.has_holistic() {
            bail!(vpr_core::VprError::MissingHolistic(format!(
                "{} (run `vpr aggregate` first or pass --exhaustive)",
                c.db.display()
            )));
        }
        QueryMode::Hierarchical { k_top: p.topk }
    };
    let results = run_queries(&r, &queries, mode)?;
    write_jsonl(&c.output, &manifest, &results)?;
    log::info!(
        "ranked {} queries against {} images",
        results.len(),
        db.len()
    );
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<RetrievalResult>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading results {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: not valid JSON", path.display(), n + 1))?;
        if value.get("manifest").is_some() {
            continue;
        }
        out.push(
            serde_json::from_value(value)
                .with_context(|| format!("{}:{}: not a retrieval result", path.display(), n + 1))?,
        );
    }
    Ok(out)
}

#[derive(Serialize)]
struct RecallEntry {
    k: usize,
    recall: f64,
}

#[derive(Serialize)]
struct Metrics {
    auc: f64,
    positives: usize,
    pairs: usize,
    recall: Vec<RecallEntry>,
    evaluated_queries: usize,
    excluded_queries: usize,
}

fn evaluate(c: &EvaluateCmd, p: EvaluateParams, ctx: &RunContext) -> Result<()> {
    if p.ks.is_empty() || p.ks.contains(&0) {
        return Err(usage("--ks needs positive cut-offs"));
    }
    let results = read_results(&c.results)?;
    let gt = GroundTruth::load(&c.gt)
        .with_context(|| format!("reading ground truth {}", c.gt.display()))?;
    let curve = pr_auc_from_results(&results, &gt)?;
    let rec = recall_at_k(&results, &gt, &p.ks)?;
    let metrics = Metrics {
        auc: curve.auc,
        positives: curve.positives,
        pairs: curve.pairs,
        recall: rec
            .ks
            .iter()
            .zip(&rec.recall)
            .map(|(&k, &recall)| RecallEntry { k, recall })
            .collect(),
        evaluated_queries: rec.evaluated,
        excluded_queries: rec.excluded,
    };
    let mut manifest = RunManifest::new("evaluate", &p, ctx.parallelism)?
        .input("results", &c.results)
        .input("ground_truth", &c.gt)
        .output("metrics", &c.output);
    if let Some(path) = &c.csv {
        manifest = manifest.output("csv", path);
    }
    if let Some(path) = &c.pr_curve {
        manifest = manifest.output("pr_curve", path);
    }
    write_json(&c.output, &manifest, &metrics)?;
    if let Some(path) = &c.csv {
        let mut rows = vec![vec!["auc".into(), String::new(), curve.auc.to_string()]];
        rows.extend(
            metrics
                .recall
                .iter()
                .map(|r| vec!["recall".into(), r.k.to_string(), r.recall.to_string()]),
        );
        write_csv(path, &["metric", "k", "value"], &rows)?;
    }
    if let Some(path) = &c.pr_curve {
        write_text(path, &curve.to_gnuplot())?;
    }
    let recalls: Vec<String> = metrics
        .recall
        .iter()
        .map(|r| format!("R@{} {:.4}", r.k, r.recall))
        .collect();
    println!("AUC {:.4}  {}", curve.auc, recalls.join("  "));
    if rec.excluded > 0 {
        println!(
            "{} queries without ground truth were excluded",
            rec.excluded
        );
    }
    Ok(())
}

fn sweep(c: &SweepCmd, p: SweepParams, ctx: &RunContext) -> Result<()> {
    let db = Database::new(load_store(&c.db)?)?;
    let queries = load_store(&c.queries)?;
    let gt = GroundTruth::load(&c.gt)
        .with_context(|| format!("reading ground truth {}", c.gt.display()))?;
    let grid = sweep_lpg(&db, &queries, &gt, &p.sigmas, &p.hs, p.lpg_exact)?;
    let mut manifest = RunManifest::new("sweep", &p, ctx.parallelism)?
        .input("db", &c.db)
        .input("queries", &c.queries)
        .input("ground_truth", &c.gt)
        .output("grid", &c.output);
    if let Some(path) = &c.csv {
        manifest = manifest.output("csv", path);
    }
    #[derive(Serialize)]
    struct Out<'a> {
        #[serde(flatten)]
        grid: &'a vpr_core::eval::SweepGrid,
        best: Option<(f64, f64, f64)>,
    }
    write_json(
        &c.output,
        &manifest,
        &Out {
            grid: &grid,
            best: grid.best(),
        },
    )?;
    if let Some(path) = &c.csv {
        let mut rows = Vec::new();
        for (i, s) in grid.sigmas.iter().enumerate() {
            for (j, h) in grid.hs.iter().enumerate() {
                rows.push(vec![
                    s.to_string(),
                    h.to_string(),
                    grid.auc[i][j].to_string(),
                ]);
            }
        }
        write_csv(path, &["sigma", "h", "auc"], &rows)?;
    }
    // Table layout: one row per sigma, one column per h.
    let header: Vec<String> = grid.hs.iter().map(|h| format!("{h:>8}")).collect();
    println!("{:>8}{}", "σ \\ h", header.join(""));
    for (s, row) in grid.sigmas.iter().zip(&grid.auc) {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:>8.4}")).collect();
        println!("{s:>8}{}", cells.join(""));
    }
    Ok(())
}

fn bench(c: &BenchCmd, p: BenchParams, ctx: &RunContext) -> Result<()> {
    if p.rerankers.is_empty() {
        return Err(usage("--rerankers needs at least one entry"));
    }
    let mut db_sets = load_store(&c.db)?;
    let queries = load_store(&c.queries)?;
    if db_sets.iter().any(|s| s.holistic().is_none())
        || queries.iter().any(|s| s.holistic().is_none())
    {
        bail!(vpr_core::VprError::MissingHolistic(
            "bench stores (run `vpr aggregate` first)".into()
        ));
    }
    // Large stores: drop the input vector's spare capacity before the
    // database takes ownership.
    db_sets.shrink_to_fit();
    let db = Database::new(db_sets)?;
    let choices: Vec<RerankerChoice> = p
        .rerankers
        .iter()
        .map(|&k| reranker(k, &p.lpg, &p.ransac))
        .collect();
    let reports = bench_compare(
        &db,
        &queries,
        p.topk,
        &choices,
        p.repetitions,
        ctx.parallelism,
    )?;
    let mut manifest = RunManifest::new("bench", &p, ctx.parallelism)?
        .input("db", &c.db)
        .input("queries", &c.queries)
        .output("report", &c.output);
    if let Some(path) = &c.csv {
        manifest = manifest.output("csv", path);
    }
    #[derive(Serialize)]
    struct Out<'a> {
        reports: &'a [vpr_core::eval::TimingReport],
    }
    write_json(&c.output, &manifest, &Out { reports: &reports })?;
    if let Some(path) = &c.csv {
        let rows = reports
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.total_seconds.to_string(),
                    r.total_seconds_std.to_string(),
                    r.mean_query_ms.to_string(),
                    r.pairs_per_second.to_string(),
                    r.repetitions.to_string(),
                    r.parallelism.to_string(),
                ]
            })
            .collect::<Vec<_>>();
        write_csv(
            path,
            &[
                "reranker",
                "total_s",
                "total_std_s",
                "mean_query_ms",
                "pairs_per_s",
                "repetitions",
                "parallelism",
            ],
            &rows,
        )?;
    }
    for r in &reports {
        println!(
            "{:<8} total {:.3} s (± {:.3})  {:.2} ms/query  {:.0} pairs/s",
            r.label, r.total_seconds, r.total_seconds_std, r.mean_query_ms, r.pairs_per_second
        );
    }
    Ok(())
}

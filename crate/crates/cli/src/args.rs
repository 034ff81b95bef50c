//! Command-line definitions.
//!
//! Every subcommand keeps its tunable parameters in a separate struct that
//! is both a clap argument group and a serde type. A `--config` JSON file
//! can then override any parameter by name, and the same struct is recorded
//! verbatim in the run manifest.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "vpr", version, about = "Hierarchical visual place recognition")]
pub struct Cli {
    /// JSON file whose keys override parameter flags. Keys may sit at the top
    /// level or under a section named after the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (default: all cores; 1 for `bench`).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: database and query stores plus ground truth.
    Gen(GenCmd),
    /// Turn dense maps (VPRD) into a local-feature store (VPRF).
    Postprocess(PostprocessCmd),
    /// Add HDC holistic descriptors to a feature store.
    Aggregate(AggregateCmd),
    /// Precompute the LPG star graphs of a database store (VPRG).
    Graphs(GraphsCmd),
    /// Rank the database for every query (JSON lines).
    Retrieve(RetrieveCmd),
    /// PR-AUC and Recall@K of a result file.
    Evaluate(EvaluateCmd),
    /// Exhaustive-LPG AUC over a (sigma, h) grid.
    Sweep(SweepCmd),
    /// Time the comparison stage of several re-rankers.
    Bench(BenchCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gen(_) => "gen",
            Self::Postprocess(_) => "postprocess",
            Self::Aggregate(_) => "aggregate",
            Self::Graphs(_) => "graphs",
            Self::Retrieve(_) => "retrieve",
            Self::Evaluate(_) => "evaluate",
            Self::Sweep(_) => "sweep",
            Self::Bench(_) => "bench",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenCmd {
    /// Directory for db.vprf, queries.vprf and ground_truth.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub params: GenParams,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenParams {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub db_size: usize,
    #[arg(long, default_value_t = 10)]
    pub query_size: usize,
    #[arg(long, default_value_t = 200)]
    pub features: usize,
    #[arg(long, default_value_t = 1024)]
    pub d_loc: usize,
    /// Descriptor noise level (expected perturbation norm).
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Uniform position jitter per axis, in normalized units.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Fraction of query features replaced by random ones.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
}

#[derive(Debug, Args)]
pub struct PostprocessCmd {
    /// Dense maps (VPRD).
    #[arg(long)]
    pub input: PathBuf,
    /// Output feature store (VPRF).
    #[arg(long)]
    pub output: PathBuf,
    /// Existing PCA model (VPRP).
    #[arg(long, conflicts_with = "fit_pca", required_unless_present = "fit_pca")]
    pub pca: Option<PathBuf>,
    /// Fit PCA on the input's own patches.
    #[arg(long)]
    pub fit_pca: bool,
    /// Where to save a fitted model.
    #[arg(long, requires = "fit_pca")]
    pub pca_out: Option<PathBuf>,
    #[command(flatten)]
    pub params: PostprocessParams,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PostprocessParams {
    /// Patch side length (odd).
    #[arg(long = "patch", default_value_t = 7)]
    pub patch: usize,
    /// Keypoints kept per image, strongest first.
    #[arg(long, default_value_t = 200)]
    pub max_features: usize,
    /// Output descriptor length when fitting PCA.
    #[arg(long, default_value_t = 1024)]
    pub d_loc: usize,
    /// Cap on patches used to fit PCA (evenly strided); all when absent.
    #[arg(long)]
    pub pca_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AggregateCmd {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub params: HdcParams,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct HdcParams {
    #[arg(long, default_value_t = 0)]
    pub hdc_seed: u64,
    #[arg(long, default_value_t = 4096)]
    pub hdc_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub n_x: usize,
    #[arg(long, default_value_t = 9)]
    pub n_y: usize,
}

#[derive(Debug, Args)]
pub struct GraphsCmd {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub params: GraphParams,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GraphParams {
    /// Window side length in normalized units.
    #[arg(long, default_value_t = 60.0)]
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankerKind {
    Mm,
    Lpg,
    Ransac,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LpgParams {
    /// Width of the LPG displacement Gaussian.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// LPG window side length in normalized units.
    #[arg(long, default_value_t = 60.0)]
    pub h: f64,
    /// Evaluate the Gaussian directly instead of through the lookup table.
    #[arg(long)]
    pub lpg_exact: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RansacFlags {
    #[arg(long, default_value_t = 2000)]
    pub ransac_iters: usize,
    /// Sampson-distance inlier threshold.
    #[arg(long, default_value_t = 2.0)]
    pub ransac_tau: f64,
    #[arg(long, default_value_t = 0.99)]
    pub ransac_confidence: f64,
    #[arg(long, default_value_t = 0)]
    pub ransac_seed: u64,
}

#[derive(Debug, Args)]
pub struct RetrieveCmd {
    /// Database store (VPRF).
    #[arg(long)]
    pub db: PathBuf,
    /// Query store (VPRF).
    #[arg(long)]
    pub queries: PathBuf,
    /// Result file (JSON lines).
    #[arg(long)]
    pub output: PathBuf,
    /// Precomputed star graphs (VPRG) for the database.
    #[arg(long)]
    pub graphs: Option<PathBuf>,
    #[command(flatten)]
    pub params: RetrieveParams,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RetrieveParams {
    #[arg(long, value_enum, default_value_t = RerankerKind::Lpg)]
    pub reranker: RerankerKind,
    /// Candidates kept by the holistic stage.
    #[arg(long, default_value_t = 100)]
    pub topk: usize,
    /// Re-rank the whole database instead of the holistic top-K.
    #[arg(long)]
    pub exhaustive: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub lpg: LpgParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub ransac: RansacFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateCmd {
    /// Result file written by `retrieve`.
    #[arg(long)]
    pub results: PathBuf,
    /// Ground truth JSON: query id -> list of matching database ids.
    #[arg(long)]
    pub gt: PathBuf,
    /// Metrics JSON.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Gnuplot-friendly PR curve (two columns: recall precision).
    #[arg(long)]
    pub pr_curve: Option<PathBuf>,
    #[command(flatten)]
    pub params: EvaluateParams,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateParams {
    /// Recall cut-offs.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,100")]
    pub ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub params: SweepParams,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepParams {
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
    pub sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "20,40,60,80,100")]
    pub hs: Vec<f64>,
    #[arg(long)]
    pub lpg_exact: bool,
}

#[derive(Debug, Args)]
pub struct BenchCmd {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Timing report JSON.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub params: BenchParams,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchParams {
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "mm,lpg,ransac"
    )]
    pub rerankers: Vec<RerankerKind>,
    #[arg(long, default_value_t = 100)]
    pub topk: usize,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub lpg: LpgParams,
    #[command(flatten)]
    #[serde(flatten)]
    pub ransac: RansacFlags,
}

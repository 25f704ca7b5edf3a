use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hkm::pipeline::{P1Config, P2Config};
use hkm::sampling::SamplingConfig;
use hkm::{AdmissibilityMode, Kernel, PlanDefaults, PointFormat, SamplingMode, Shape, SplitMethod};

#[derive(Debug, Parser)]
#[command(name = "hkm", version, about = "Hierarchical kernel-matrix compression and evaluation")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the tree, interactions and compressed matrix, and write them to --out.
    Inspect(InspectArgs),
    /// Multiply a compressed matrix from an artifact directory by W.
    Eval(EvalArgs),
    /// Sweep block accuracy and report the overall error as CSV.
    Accuracy(AccuracyArgs),
    /// Time evaluation against a dense GEMM with the materialized kernel matrix.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FileFormat {
    Csv,
    Bin,
}

impl From<FileFormat> for PointFormat {
    fn from(f: FileFormat) -> Self {
        match f {
            FileFormat::Csv => PointFormat::Text,
            FileFormat::Bin => PointFormat::Binary,
        }
    }
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Point file, one point per line (csv) or binary (n, d, f64 payload).
    #[arg(long, conflicts_with = "synth")]
    pub points: Option<PathBuf>,

    /// Format of --points; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FileFormat>,

    /// Synthetic points instead of a file: grid2d, uniform:D or sphere3d.
    #[arg(long, default_value = "uniform:2")]
    pub synth: Shape,

    /// Number of synthetic points.
    #[arg(short, long, default_value_t = 4096)]
    pub n: usize,

    /// Seed for synthetic points, tree splitting, sampling and random W.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl InputArgs {
    pub fn describe(&self) -> String {
        match &self.points {
            Some(p) => format!("points={}", p.display()),
            None => format!("synth={} n={}", self.synth, self.n),
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Admissibility: tau:VALUE or hss.
    #[arg(long, default_value = "tau:0.65")]
    pub mode: AdmissibilityMode,

    /// Maximum points per leaf.
    #[arg(long, default_value_t = 64)]
    pub leaf: usize,

    /// Tree split rule: auto, kdtree or twomeans.
    #[arg(long, default_value = "auto")]
    pub split: SplitMethod,

    /// gaussian:H or invdist.
    #[arg(long, default_value = "gaussian:1")]
    pub kernel: Kernel,

    /// Block accuracy passed to the interpolative decomposition.
    #[arg(long, default_value_t = 1e-5)]
    pub bacc: f64,

    #[arg(long, default_value_t = 256)]
    pub max_rank: usize,

    /// Sub-trees per worker in the coarsened schedule.
    #[arg(long, default_value_t = 2)]
    pub agg: usize,

    /// Defaults to the number of available cores.
    #[arg(long)]
    pub workers: Option<usize>,

    /// neighbor or exact.
    #[arg(long, default_value = "neighbor")]
    pub sampling: SamplingMode,

    /// Nearest neighbours per point for sampling.
    #[arg(long, default_value_t = 32)]
    pub k: usize,

    /// Sampled rows per node; defaults to twice --max-rank.
    #[arg(long)]
    pub budget: Option<usize>,

    #[arg(long, default_value_t = 2)]
    pub near_blocksize: usize,

    #[arg(long, default_value_t = 4)]
    pub far_blocksize: usize,
}

impl CompressArgs {
    pub fn workers(&self) -> usize {
        self.workers.unwrap_or_else(hkm::plan::default_workers)
    }

    pub fn p1_config(&self, seed: u64) -> P1Config {
        P1Config {
            mode: self.mode,
            leaf_size: self.leaf,
            split: self.split,
            tree_seed: seed,
            sampling: SamplingConfig {
                mode: self.sampling,
                k: self.k,
                budget: self.budget.unwrap_or(2 * self.max_rank),
                seed,
                ..SamplingConfig::default()
            },
            near_blocksize: self.near_blocksize,
            far_blocksize: self.far_blocksize,
        }
    }

    pub fn p2_config(&self) -> P2Config {
        P2Config {
            kernel: self.kernel,
            bacc: self.bacc,
            max_rank: self.max_rank,
            agg: self.agg,
            plan: PlanDefaults {
                workers: self.workers(),
                ..PlanDefaults::default()
            },
            ..P2Config::default()
        }
    }

    pub fn describe(&self, seed: u64) -> String {
        let p1 = self.p1_config(seed);
        let p2 = self.p2_config();
        format!(
            "mode={} leaf={} split={} sampling={} k={} trees={} budget={} blocksize={}/{} kernel={} bacc={:e} max_rank={} agg={} coarsen_threshold={} workers={}",
            p1.mode,
            p1.leaf_size,
            p1.split,
            format!("{:?}", p1.sampling.mode).to_lowercase(),
            p1.sampling.k,
            p1.sampling.num_trees,
            p1.sampling.budget,
            p1.near_blocksize,
            p1.far_blocksize,
            p2.kernel,
            p2.bacc,
            p2.max_rank,
            p2.agg,
            p2.plan.coarsen_threshold,
            p2.plan.workers,
        )
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub compress: CompressArgs,

    /// Artifact directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Keep phase-one artifacts in --out when they match the inputs.
    #[arg(long)]
    pub reuse: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ErrorCheck {
    None,
    /// Dense oracle when n is small enough, else sampled rows.
    Auto,
    Dense,
    Sampled,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Artifact directory written by `inspect`.
    #[arg(long)]
    pub dir: PathBuf,

    /// Right-hand side file (n rows, Q columns); random when omitted.
    #[arg(long)]
    pub w: Option<PathBuf>,

    /// Columns of the random right-hand side.
    #[arg(long, default_value_t = 1)]
    pub q: usize,

    /// Seed of the random right-hand side.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Where to write Y; format from the extension unless --format is given.
    #[arg(long)]
    pub output: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub format: Option<FileFormat>,

    /// Override the worker count stored in the plan.
    #[arg(long)]
    pub workers: Option<usize>,

    /// Report the relative error against the exact product.
    #[arg(long, value_enum, default_value = "none")]
    pub error: ErrorCheck,

    /// Rows used by the sampled error check.
    #[arg(long, default_value_t = 1024)]
    pub error_rows: usize,
}

#[derive(Debug, Args)]
pub struct AccuracyArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub compress: CompressArgs,

    /// Block accuracies to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1e-1,1e-2,1e-3,1e-4,1e-5")]
    pub baccs: Vec<f64>,

    #[arg(long, default_value_t = 16)]
    pub q: usize,

    /// Rows used when n is too large for the dense oracle.
    #[arg(long, default_value_t = 1024)]
    pub error_rows: usize,

    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub compress: CompressArgs,

    /// Right-hand-side widths.
    #[arg(long, value_delimiter = ',', default_value = "1,256,1024,2048")]
    pub qs: Vec<usize>,

    /// Worker counts to sweep; defaults to --workers alone.
    #[arg(long, value_delimiter = ',')]
    pub worker_sweep: Vec<usize>,

    /// Timed repetitions; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,

    /// Skip the dense baseline.
    #[arg(long)]
    pub no_dense: bool,

    #[arg(long)]
    pub csv: Option<PathBuf>,
}

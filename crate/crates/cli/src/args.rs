use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use visex_core::filter::FilterMode;
use visex_core::pipeline::PipelineConfig;
use visex_core::repr::ReprKind;
use visex_core::triage::Verdict;
use visex_core::zsl::{Architecture, Negatives};

#[derive(Debug, Parser)]
#[command(name = "visex", version, about = "Visual sentence extraction and zero-shot alignment")]
pub struct Cli {
    /// TOML or JSON run configuration; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a sentence corpus (and optionally image files) and summarize it.
    Ingest(IngestArgs),
    /// Fit k-means over the corpus sentences.
    Cluster(ClusterArgs),
    /// Run the triage HTTP service.
    Serve(ServeArgs),
    /// Keep the sentences selected by a filter mode.
    Filter(FilterArgs),
    /// Build one vector per class from filtered sentences.
    Repr(ReprArgs),
    /// Train the image/class alignment model.
    Train(TrainArgs),
    /// Score a trained model on test images.
    Eval(EvalArgs),
    /// Run every stage and write a manifest.
    Pipeline(PipelineArgs),
    /// Write a synthetic data set with known visual sentences.
    Fixture(FixtureArgs),
    /// Run the pipeline over a grid of thresholds and margins.
    Sweep(SweepArgs),
    /// Read or write triage labels through a running service.
    #[command(subcommand)]
    Label(LabelCommand),
    /// Ask a running service to rebuild filtered sets and class vectors.
    Recompute(RecomputeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Summary JSON [default: <out-dir>/ingest.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub normalize: bool,
    /// Cluster model JSON [default: <out-dir>/cluster_model.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-cluster exemplars and section histograms here.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub exemplars: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory for recompute outputs [default: <out-dir>/recompute]
    #[arg(long)]
    pub recompute_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<FilterMode>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Filtered sentences [default: <out-dir>/filtered.jsonl]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Retention statistics [default: <out-dir>/filter_stats.json]
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReprArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output of `visex filter` [default: <out-dir>/filtered.jsonl]
    #[arg(long)]
    pub filtered: Option<PathBuf>,
    /// Restrict to the classes of this split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<ReprKind>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub init_epochs: Option<usize>,
    #[arg(long)]
    pub margin_epochs: Option<usize>,
    /// Representations [default: <out-dir>/representations.jsonl]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Weight-net checkpoint [default: <out-dir>/weightnet.json]
    #[arg(long)]
    pub weightnet: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Class representations [default: <out-dir>/representations.jsonl]
    #[arg(long)]
    pub repr: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `all` or a number of sampled negatives per example.
    #[arg(long)]
    pub negatives: Option<Negatives>,
    #[arg(long, value_parser = parse_architecture)]
    pub architecture: Option<Architecture>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model checkpoint [default: <out-dir>/model.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Candidates {
    Unseen,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint [default: <out-dir>/model.json]
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub repr: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Candidates::Unseen)]
    pub candidates: Candidates,
    /// Also write the per-hop breakdown to this file.
    #[arg(long)]
    pub hops: Option<PathBuf>,
    /// Report [default: <out-dir>/report.json, or report_gzsl.json with --candidates all]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub mode: Option<FilterMode>,
    #[arg(long)]
    pub kind: Option<ReprKind>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Seed for every stage.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.75)]
    pub seen_fraction: f64,
    #[arg(long, default_value_t = 30)]
    pub sentences: usize,
    #[arg(long, default_value_t = 0.4)]
    pub visual_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also fit clusters, write oracle triage labels and a `pipeline.toml`.
    #[arg(long)]
    pub labels: bool,
    /// Cluster count used with `--labels`.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.95, 0.96, 0.97, 0.98])]
    pub taus: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.5])]
    pub margins: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ServiceArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub url: String,
}

#[derive(Debug, Subcommand)]
pub enum LabelCommand {
    /// Label a section header.
    Section {
        name: String,
        verdict: Verdict,
        /// Refuse the write unless the labels are at this revision.
        #[arg(long)]
        expect_revision: Option<u64>,
        #[command(flatten)]
        service: ServiceArgs,
    },
    /// Label a cluster by index.
    Cluster {
        index: usize,
        verdict: Verdict,
        #[arg(long)]
        expect_revision: Option<u64>,
        #[command(flatten)]
        service: ServiceArgs,
    },
    /// Print the current labels as JSON.
    Show {
        #[command(flatten)]
        service: ServiceArgs,
    },
}

#[derive(Debug, Args)]
pub struct RecomputeArgs {
    #[arg(long)]
    pub mode: Option<FilterMode>,
    #[arg(long)]
    pub kind: Option<ReprKind>,
    #[command(flatten)]
    pub service: ServiceArgs,
}

fn parse_architecture(s: &str) -> Result<Architecture, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("expected `plain` or `star`, got `{s}`"))
}

/// Run configuration: the config file if given, otherwise defaults, with
/// `--out-dir` applied on top.
pub fn base_config(cli: &Cli) -> visex_core::error::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

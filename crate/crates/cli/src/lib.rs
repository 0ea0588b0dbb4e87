//! The `xmc` command line: each subcommand runs one pipeline stage and
//! exchanges plain files with the others.
//!
//! Settings resolve as built-in defaults, then the `--config` file, then
//! flags. Exit codes: 0 success, 1 usage, 2 data, 3 internal.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use xmc_core::{Error, ErrorKind, Result};

mod commands;
pub mod config;
pub mod files;

pub use config::ConfigFile;

#[derive(Debug, Parser)]
#[command(name = "xmc", version, about = "Comment-aware cross-modal retrieval and self-training")]
pub struct Cli {
    /// `key = value` settings file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with class structure in every modality.
    Synth(SynthArgs),
    /// Validate and normalize a corpus.
    Ingest(IngestArgs),
    /// Train an IVFPQ index over the wild posts of one modality.
    BuildIndex(BuildIndexArgs),
    /// Estimate the image/text fusion weight from query statistics.
    EstimateAlpha(EstimateAlphaArgs),
    /// Retrieve the top-K wild posts for each query.
    Retrieve(RetrieveArgs),
    /// Select consensus comments from each query's retrieved posts.
    Consensus(ConsensusArgs),
    /// Train a classifier on the labeled posts only.
    Train(TrainArgs),
    /// Teacher-student self-training with retrieved unlabeled posts.
    Selftrain(TrainArgs),
    /// Score a trained classifier on one split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random inputs.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Store vectors in binary sidecar files next to the corpus.
    #[arg(long)]
    pub sidecars: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub val_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub wild_per_class: Option<usize>,
    #[arg(long)]
    pub image_dim: Option<usize>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long)]
    pub comment_signal: Option<f64>,
    #[arg(long)]
    pub comment_noise: Option<f64>,
    #[arg(long)]
    pub max_comments: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sidecars: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub modality: Modality,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub nlist: Option<usize>,
    /// Subquantizers per vector.
    #[arg(long)]
    pub m: Option<usize>,
    /// Codewords per subquantizer.
    #[arg(long)]
    pub ks: Option<usize>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct IndexInputs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub image_index: PathBuf,
    #[arg(long)]
    pub text_index: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchFlags {
    /// Posts kept per query.
    #[arg(long)]
    pub k: Option<usize>,
    /// Per-modality candidate depth.
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub nprobe: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateAlphaArgs {
    #[command(flatten)]
    pub inputs: IndexInputs,
    #[command(flatten)]
    pub search: SearchFlags,
    /// Comma-separated splits whose posts serve as queries.
    #[arg(long, default_value = "train")]
    pub splits: String,
    /// `ann` scans the indexes; `exact` scans raw vectors.
    #[arg(long)]
    pub scan: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub inputs: IndexInputs,
    #[command(flatten)]
    pub search: SearchFlags,
    /// Output of `estimate-alpha`.
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Fixed fusion weight; overrides `--weights`.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Recompute final scores from raw vectors (default true).
    #[arg(long)]
    pub exact_rescore: Option<bool>,
    #[arg(long, default_value = "train,val,test")]
    pub splits: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConsensusArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub retrieval: PathBuf,
    /// Consensus comments kept per query.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub retrieval: PathBuf,
    #[arg(long)]
    pub consensus: PathBuf,
    /// Checkpoint path for the final model.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history followed by a summary line.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    /// `early` or `late`.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub attn_hidden: Option<usize>,
    /// `macro-f1` or `accuracy`.
    #[arg(long)]
    pub validation_metric: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub consensus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write per-post attention weights here.
    #[arg(long)]
    pub attention: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_dim: Option<usize>,
    #[arg(long)]
    pub text_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub attn_hidden: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Comments per example.
    #[arg(long, default_value_t = 5)]
    pub comments: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = xmc_core::neural::DEFAULT_STEP)]
    pub step: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Internal => 3,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("XMC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("XMC_THREADS must be a positive integer, got {raw:?}")))?;
    // A pool may already exist when called twice in one process; the first wins.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    commands::dispatch(cli.command, &config)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

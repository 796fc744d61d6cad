//! `sgqa`: train, evaluate and inspect sentence-gated QA models.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 bad configuration,
//! missing data or a checkpoint that does not fit, 3 numeric failure,
//! 4 gradient check over threshold.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sgqa_core::encoders::SentenceEncoding;
use sgqa_core::gate::Combiner;
use sgqa_core::metrics::TaskKind;

/// Bad input from the user: config, paths, flags or mismatched files.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parameter groups whose gradient check exceeded the threshold.
#[derive(Debug)]
pub struct GradCheckFailure(pub Vec<String>);

impl std::fmt::Display for GradCheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradCheckFailure {}

#[derive(Parser, Debug)]
#[command(name = "sgqa", version, about = "Question-aware sentence gating for reading comprehension")]
pub struct Cli {
    /// TOML run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, writing checkpoints and a per-epoch metric log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Trace gate activations and write rankings, hop statistics and heatmaps.
    Analyze(AnalyzeArgs),
    /// Write a synthetic span or cloze dataset.
    GenData(GenDataArgs),
    /// Compare analytic and finite-difference gradients of tiny models.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Span,
    Cloze,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Span => TaskKind::Span,
            TaskArg::Cloze => TaskKind::Cloze,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncoderArg {
    AveragePooling,
    BigruLast,
    MaxPooling,
    InnerAttention,
}

impl From<EncoderArg> for SentenceEncoding {
    fn from(e: EncoderArg) -> Self {
        match e {
            EncoderArg::AveragePooling => SentenceEncoding::AveragePooling,
            EncoderArg::BigruLast => SentenceEncoding::BigruLast,
            EncoderArg::MaxPooling => SentenceEncoding::MaxPooling,
            EncoderArg::InnerAttention => SentenceEncoding::InnerAttention,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CombinerArg {
    Concatenation,
    ScalarGate,
    VectorGate,
}

impl From<CombinerArg> for Combiner {
    fn from(c: CombinerArg) -> Self {
        match c {
            CombinerArg::Concatenation => Combiner::Concatenation,
            CombinerArg::ScalarGate => Combiner::ScalarGate,
            CombinerArg::VectorGate => Combiner::VectorGate,
        }
    }
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Per-direction GRU size.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    #[arg(long, value_enum)]
    combiner: Option<CombinerArg>,
    /// Feed raw sentence vectors to the gate instead of question-matched ones.
    #[arg(long)]
    no_matching: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Scored after every epoch when given.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    train_sample: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sentence-length breakdown; 5 buckets unless a count is given.
    #[arg(long, num_args = 0..=1, default_missing_value = "5")]
    buckets: Option<usize>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of examples rendered as heatmaps.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    min_count: Option<usize>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<GradCheckFailure>() {
            return 4;
        }
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<sgqa_core::Error>() {
            return match e {
                sgqa_core::Error::NonFinite { .. } | sgqa_core::Error::Domain(_) => 3,
                _ => 2,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

//! `capeval`: score captions with a vision-language model, compute
//! reference-based baselines, and compare either against human judgments.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use capeval_core::dataset::DatasetKind;

#[derive(Parser)]
#[command(
    name = "capeval",
    version,
    about = "Caption evaluation with a vision-language model as the judge"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every candidate caption in a dataset.
    Score(ScoreArgs),
    /// Run only the visual-context stage, once per distinct image.
    ExtractContext(RunArgs),
    /// Compute BLEU-4, ROUGE-L, and CIDEr-D for every candidate.
    Baselines(BaselinesArgs),
    /// Correlate automatic scores with the human judgments in a dataset.
    MetaEval(MetaEvalArgs),
    /// Render a saved meta-evaluation report as markdown.
    Report(ReportArgs),
    /// Inspect or prune the response cache.
    Cache(CacheArgs),
}

fn parse_kind(s: &str) -> Result<DatasetKind, String> {
    DatasetKind::parse(s)
        .ok_or_else(|| "expected thumb, flickr8k_expert, composite, or pascal50s".to_string())
}

#[derive(Args)]
struct DatasetArgs {
    /// JSONL dataset path.
    #[arg(long)]
    dataset: PathBuf,
    /// Dataset kind: thumb, flickr8k_expert, composite, or pascal50s.
    #[arg(long, value_parser = parse_kind)]
    kind: DatasetKind,
    /// Base directory for relative image paths.
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Verify referenced image files exist while loading the dataset.
    #[arg(long)]
    check_images: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// TOML config file. Command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Judge mode: vanilla, reference, description, or visce.
    #[arg(long)]
    mode: Option<String>,
    /// Base URL of an OpenAI-compatible chat completions endpoint.
    #[arg(long)]
    endpoint_url: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    auth_env: Option<String>,
    /// Model identifier sent with every request.
    #[arg(long)]
    model: Option<String>,
    /// Response cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Disable the response cache even if the config file names one.
    #[arg(long)]
    no_cache: bool,
    /// Worker threads (also the request parallelism cap).
    #[arg(long)]
    workers: Option<usize>,
    /// Sampling temperature for both stages.
    #[arg(long)]
    temperature: Option<f64>,
    /// Sampling seed passed through to the endpoint.
    #[arg(long)]
    seed: Option<i64>,
    /// Abort on the first unparseable score instead of recording it.
    #[arg(long)]
    strict: bool,
    /// Zero wall-clock fields so repeated runs serialize identically.
    #[arg(long)]
    reproducible: bool,
    /// Extract visual context once per candidate instead of once per image.
    /// Only makes a difference when the cache is disabled.
    #[arg(long)]
    context_per_candidate: bool,
    /// JSON script driving an in-process mock backend instead of HTTP.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, default_value = "capeval-out")]
    output: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also compute reference-based baselines and write baselines.jsonl.
    #[arg(long)]
    with_baselines: bool,
}

#[derive(Args)]
struct BaselinesArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Directory for output files.
    #[arg(long, default_value = "capeval-out")]
    output: PathBuf,
    /// Treat dataset irregularities as errors.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct MetaEvalArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// records.jsonl from a scoring run.
    #[arg(long, conflicts_with = "baselines")]
    records: Option<PathBuf>,
    /// baselines.jsonl from the baselines command.
    #[arg(long)]
    baselines: Option<PathBuf>,
    /// Baseline metric to evaluate: bleu4, rouge_l, or cider_d.
    #[arg(long)]
    metric: Option<String>,
    /// Headline rank correlation: b or c. Both are always computed.
    #[arg(long, default_value = "b")]
    tau: String,
    /// Credit for a tied pairwise comparison: 0 or 0.5.
    #[arg(long, default_value_t = 0.0)]
    tie_credit: f64,
    /// Number of heatmap bins over the 0-100 score range.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Average the expert scores per item instead of pairing each expert
    /// judgment separately.
    #[arg(long)]
    average_experts: bool,
    /// Drop human-written candidates from rating correlations.
    #[arg(long)]
    exclude_human_captions: bool,
    /// Treat dataset irregularities as errors.
    #[arg(long)]
    strict: bool,
    /// Directory for output files.
    #[arg(long, default_value = "capeval-out")]
    output: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json produced by meta-eval.
    #[arg(long)]
    report: PathBuf,
    /// Write the markdown here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CacheArgs {
    #[command(subcommand)]
    action: CacheAction,
}

#[derive(Subcommand)]
enum CacheAction {
    /// Print entry count and total size.
    Stats {
        #[arg(long)]
        cache_dir: PathBuf,
    },
    /// Remove entries older than the given age.
    Gc {
        #[arg(long)]
        cache_dir: PathBuf,
        /// Age threshold in days.
        #[arg(long)]
        older_than_days: f64,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Score(args) => commands::score(&args),
        Command::ExtractContext(args) => commands::extract_context(&args),
        Command::Baselines(args) => commands::baselines(&args),
        Command::MetaEval(args) => commands::meta_eval(&args),
        Command::Report(args) => commands::report(&args),
        Command::Cache(args) => commands::cache(&args),
    }
}

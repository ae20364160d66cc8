//! `aspectfuse`: generate corpora, retrieve, rerank, evaluate and run full
//! experiment grids from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input or config,
//! 3 language-model endpoint exhausted.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use aspectfuse_core::{Aggregator, AspectSource, DistributionKind, Method, RerankMode};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "aspectfuse",
    version,
    about = "Multi-aspect reviewed-item retrieval"
)]
struct Cli {
    /// More log output; repeat for debug level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate reviews for labelled items under a review-aspect distribution.
    GenCorpus(GenCorpusArgs),
    /// Draw a synthetic corpus and its embeddings directly in vector space.
    GenBench(GenBenchArgs),
    /// Rank items for every query with one method.
    Retrieve(RetrieveArgs),
    /// Rerank lists written by `retrieve`.
    Rerank(RerankArgs),
    /// Summarize MAP and recall of written lists.
    Evaluate(EvaluateArgs),
    /// Run a full (method, K_R) grid from a config file.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct LlmArgs {
    /// Endpoint config JSON for an OpenAI-compatible API; the offline mock
    /// is used when absent.
    #[arg(long)]
    llm_config: Option<PathBuf>,
    /// Append every model request and response to this JSON-Lines file.
    #[arg(long)]
    llm_log: Option<PathBuf>,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: DistributionKind,
    /// Items JSONL with labelled aspects.
    #[arg(long, required_unless_present = "from", conflicts_with = "from")]
    items: Option<PathBuf>,
    /// Queries JSONL copied into the output.
    #[arg(long, conflicts_with = "from")]
    queries: Option<PathBuf>,
    /// Existing disjoint corpus directory to thin into an imbalanced one.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Reviews per item (overlapping) or per aspect (disjoint).
    #[arg(long)]
    reviews_per: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct GenBenchArgs {
    /// Bench parameters as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<DistributionKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AspectArg {
    Gt,
    Extracted,
    WholeQuery,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// `mono` or `af` (with --aggregator), or `af:<aggregator>`.
    #[arg(long, default_value = "mono")]
    method: String,
    #[arg(long)]
    aggregator: Option<Aggregator>,
    #[arg(long = "kr", default_value_t = 1)]
    k_r: usize,
    #[arg(long = "ki", default_value_t = 10)]
    k_i: usize,
    #[arg(long, value_enum, default_value_t = AspectArg::Gt)]
    aspects: AspectArg,
    /// Include queries whose correct item has a single aspect.
    #[arg(long)]
    all_queries: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Lists written by `retrieve`.
    #[arg(long)]
    input: PathBuf,
    /// `ce` or `listwise`.
    #[arg(long)]
    mode: RerankMode,
    #[arg(long)]
    out: PathBuf,
    /// Cross-encoder passages keep this many leading characters.
    #[arg(long, default_value_t = aspectfuse_core::rerank::DEFAULT_PASSAGE_CHARS)]
    passage_chars: usize,
    /// Cross-encoder service config JSON; a length-based scorer is used
    /// when absent.
    #[arg(long)]
    ce_config: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Metric cutoff; defaults to the list capacity.
    #[arg(long)]
    k: Option<usize>,
    /// Also write the summary as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated K_R grid, e.g. 1,2,5,10,15,30.
    #[arg(long = "kr", value_delimiter = ',')]
    k_r: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    llm_log: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<DistributionKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_method(method: &str, aggregator: Option<Aggregator>) -> Result<Method, CliError> {
    match (method.trim().to_ascii_lowercase().as_str(), aggregator) {
        ("af", Some(agg)) => Ok(Method::Af(agg)),
        ("af", None) => Err(CliError::Invalid("--method af needs --aggregator".into())),
        (_, Some(_)) if method.parse::<Method>() == Ok(Method::MonoLf) => Err(CliError::Invalid(
            "--aggregator only applies to --method af".into(),
        )),
        _ => method.parse().map_err(CliError::Invalid),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(commands::GenCorpus {
            kind: a.kind,
            items: a.items,
            queries: a.queries,
            from: a.from,
            seed: a.seed,
            reviews_per_unit: a.reviews_per,
            out: a.out,
            llm_config: a.llm.llm_config,
            llm_log: a.llm.llm_log,
        }),
        Command::GenBench(a) => commands::gen_bench(commands::GenBench {
            config: a.config,
            kind: a.kind,
            seed: a.seed,
            n_items: a.n_items,
            out: a.out,
        }),
        Command::Retrieve(a) => commands::retrieve(commands::Retrieve {
            method: parse_method(&a.method, a.aggregator)?,
            corpus: a.corpus,
            embeddings: a.embeddings,
            k_r: a.k_r,
            k_i: a.k_i,
            aspects: match a.aspects {
                AspectArg::Gt => AspectSource::Gt,
                AspectArg::Extracted => AspectSource::Extracted,
                AspectArg::WholeQuery => AspectSource::WholeQuery,
            },
            all_queries: a.all_queries,
            out: a.out,
            llm_config: a.llm.llm_config,
            llm_log: a.llm.llm_log,
            threads: a.threads,
        }),
        Command::Rerank(a) => commands::rerank(commands::Rerank {
            corpus: a.corpus,
            input: a.input,
            mode: a.mode,
            out: a.out,
            passage_chars: a.passage_chars,
            llm_config: a.llm.llm_config,
            ce_config: a.ce_config,
            llm_log: a.llm.llm_log,
            threads: a.threads,
        }),
        Command::Evaluate(a) => commands::evaluate(&a.input, a.k, a.out.as_deref()),
        Command::Experiment(a) => commands::experiment(commands::Experiment {
            config: a.config,
            k_r: a.k_r,
            out: a.out,
            threads: a.threads,
            llm_log: a.llm_log,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kgi_core::corpus::ingest_corpus;
use kgi_core::dense::{build_dense_index, save_dense_dir, EmbedderSpec};
use kgi_core::metrics::{evaluate_run, render_table, RecallMode, ReportRow};
use kgi_core::service::{serve, AppState, ServiceConfig};
use kgi_core::sparse::Analyzer;
use kgi_core::{Bm25Params, ChunkParams, CorpusStore, HnswParams, Metric, SparseIndex, TaskInput, TaskKind};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "kgi", version, about = "Retrieve, rerank and generate over a passage corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus preparation.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Index construction.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Run a task over a JSON-lines input file and write KILT predictions.
    Predict(PredictArgs),
    /// Score KILT predictions against gold records.
    Eval(EvalArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Chunk a JSON-lines document file into a passage store.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        max_tokens: usize,
        #[arg(long, default_value_t = 100)]
        stride: usize,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build the BM25 index.
    Sparse {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        k1: f64,
        #[arg(long, default_value_t = 0.4)]
        b: f64,
    },
    /// Embed all passages and build the HNSW index.
    Dense(DenseArgs),
}

#[derive(Args)]
struct DenseArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// `hash`, `hash:<dim>` or an embedding service URL.
    #[arg(long, default_value = "hash")]
    embedder: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 200)]
    ef_construction: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::InnerProduct)]
    metric: MetricArg,
    #[arg(long, default_value_t = HnswParams::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    retries: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    InnerProduct,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecallArg {
    Fraction,
    AnyHit,
}

#[derive(Args)]
struct PredictArgs {
    /// Service configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// JSON lines with an `id`, a `task` and the task's fields.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_enum, default_value_t = RecallArg::Fraction)]
    recall_mode: RecallArg,
    /// Also write a markdown table here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "dataset")]
    dataset: String,
    #[arg(long, default_value = "kgi")]
    system: String,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Corpus(CorpusCommand::Ingest {
            input,
            out,
            max_tokens,
            stride,
        }) => {
            let stats = ingest_corpus(&input, ChunkParams { max_tokens, stride }, &out)
                .with_context(|| format!("ingesting {}", input.display()))?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Index(IndexCommand::Sparse { corpus, out, k1, b }) => {
            let store = open_corpus(&corpus)?;
            let index = SparseIndex::build(&store, Bm25Params { k1, b }, Analyzer::default())?;
            index.save(&out)?;
            println!(
                "{}",
                serde_json::json!({ "passages": index.n_docs(), "avg_doc_length": index.avg_doc_length() })
            );
        }
        Command::Index(IndexCommand::Dense(args)) => index_dense(args)?,
        Command::Predict(args) => predict(args)?,
        Command::Eval(args) => eval(args)?,
        Command::Serve(args) => {
            let config = load_config(&args.config)?;
            let state = AppState::from_config(&config).context("starting service")?;
            let addr = SocketAddr::new(args.host, args.port);
            tokio::runtime::Runtime::new()?.block_on(serve(Arc::new(state), addr))?;
        }
    }
    Ok(())
}

fn open_corpus(dir: &Path) -> Result<CorpusStore> {
    CorpusStore::open(dir).with_context(|| format!("opening corpus {}", dir.display()))
}

fn load_config(path: &Path) -> Result<ServiceConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config: ServiceConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(config)
}

fn index_dense(args: DenseArgs) -> Result<()> {
    let store = open_corpus(&args.corpus)?;
    let spec = EmbedderSpec::parse(&args.embedder)?;
    let embedder = spec.build(Duration::from_millis(args.timeout_ms), args.retries)?;
    let params = HnswParams {
        m: args.m,
        ef_construction: args.ef_construction,
        metric: match args.metric {
            MetricArg::InnerProduct => Metric::InnerProduct,
            MetricArg::Cosine => Metric::Cosine,
        },
        seed: args.seed,
    };
    let index = build_dense_index(&store, embedder.as_ref(), params)?;
    save_dense_dir(&args.out, &index, &embedder.spec())?;
    println!("{}", serde_json::json!({ "passages": index.len(), "dim": index.dim() }));
    Ok(())
}

#[derive(Deserialize)]
struct PredictLine {
    id: String,
    #[serde(flatten)]
    input: TaskInput,
}

fn predict(args: PredictArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let pipeline = config.build_pipeline()?;
    let reader = BufReader::new(File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?);
    let mut out = BufWriter::new(File::create(&args.out)?);
    let mut n = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: PredictLine = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", args.input.display(), i + 1))?;
        let result = pipeline
            .run_input(&item.input)
            .with_context(|| format!("instance `{}`", item.id))?;
        serde_json::to_writer(&mut out, &result.to_prediction(item.id, pipeline.corpus()))?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    eprintln!("wrote {n} predictions to {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let Some(task) = TaskKind::parse(&args.task) else {
        let allowed: Vec<&str> = TaskKind::ALL.iter().map(|t| t.as_str()).collect();
        bail!("unknown task `{}` (expected one of {})", args.task, allowed.join(", "));
    };
    let mode = match args.recall_mode {
        RecallArg::Fraction => RecallMode::Fraction,
        RecallArg::AnyHit => RecallMode::AnyHit,
    };
    let report = evaluate_run(&args.pred, &args.gold, mode)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = args.report {
        let row = ReportRow {
            dataset: args.dataset,
            task,
            system: args.system,
            report,
        };
        fs::write(&path, render_table(&[row])).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

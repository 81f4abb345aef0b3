//! Command-line runner: corpus generation, training, evaluation, decoding,
//! gradient checks and the benchmark suite.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (divergence, failed gradient check, failed benchmark criterion).

pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use uner::benchmark::{run_benchmark, BenchmarkConfig};
use uner::checkpoint::{load_checkpoint, save_checkpoint};
use uner::data_model::{load_corpus, save_corpus, Document, QuerySet};
use uner::encoder::{HeadKind, ModelConfig};
use uner::eval::{evaluate, few_shot_split, save_predictions, EvalReport, PredictedDocument};
use uner::gradcheck::{check_model, GRADCHECK_TOLERANCE};
use uner::head::LossKind;
use uner::model::Model;
use uner::synthgen::{generate_corpus, GenConfig};
use uner::train::{train_with, TrainConfig};

pub use manifest::{manifest_path, Artifact, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] uner::Error),

    /// A run that completed but missed its numeric target.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Failed(_) => 3,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(uner::Error::Config(_) | uner::Error::Infeasible(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "uner", version, about = "Entity extraction from visually-rich documents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus from a generator configuration.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a per-epoch loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or train on a few-shot subset and evaluate.
    Eval(EvalArgs),
    /// Write predictions for every document in a corpus.
    Decode(DecodeArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Run the full acceptance benchmark and print the comparison table.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator configuration (JSON). Without it, five types and default settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configuration's document count.
    #[arg(long)]
    pub n_docs: Option<usize>,
    /// Also write the configuration's query set here.
    #[arg(long)]
    pub queries_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Weight of the order loss.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// zlpr or ce.
    #[arg(long, default_value = "zlpr")]
    pub loss: LossKind,
    /// Embedding width.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4096)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    pub attention_rounds: usize,
    #[arg(long, default_value_t = 8)]
    pub bbox_frequencies: usize,
    /// Add a learned 1-D position embedding (breaks reading-order invariance).
    #[arg(long)]
    pub positions: bool,
}

impl ModelArgs {
    pub fn config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            h: self.hidden,
            vocab_size: self.vocab_size,
            attention_rounds: self.attention_rounds,
            use_1d_position: self.positions,
            bbox_frequencies: self.bbox_frequencies,
            lambda: self.lambda,
            loss_kind: self.loss,
            seed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
}

impl TrainingArgs {
    pub fn config(&self, head: HeadKind, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            head,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Query set (JSON); defaults to the corpus's entity types.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// uner or bio.
    #[arg(long, default_value = "uner")]
    pub head: HeadKind,
    /// Seeds initialization, shuffling and the few-shot subset.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on this fraction of the corpus.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Gold corpus to evaluate on.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Evaluate this checkpoint.
    #[arg(long, conflicts_with = "train", required_unless_present = "train")]
    pub checkpoint: Option<PathBuf>,
    /// Train a fresh model on this corpus first.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Report path (one JSON object).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write predictions here.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// uner or bio; with a checkpoint it must match the stored head.
    #[arg(long)]
    pub head: Option<HeadKind>,
    /// Few-shot fraction of the training corpus.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Query set to decode (UNER only); defaults to the checkpoint's.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Prediction file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Documents for the loss; defaults to one generated 8-token document.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub probes: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value = "uner")]
    pub head: HeadKind,
    /// Write the full report (JSON) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Directory for the report and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 80)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 100)]
    pub n_test: usize,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
/// Diagnostics go to stderr as a single line.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("usage error"));
            return 1;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, argv: &[String]) -> CliResult<()> {
    match command {
        Command::Generate(a) => generate(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(a) => eval_cmd(a, argv),
        Command::Decode(a) => decode(a, argv),
        Command::Gradcheck(a) => gradcheck(a, argv),
        Command::Benchmark(a) => benchmark(a, argv),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configuration serializes")
}

fn load_queries(path: Option<&Path>, corpus: &[Document]) -> CliResult<QuerySet> {
    Ok(match path {
        Some(p) => QuerySet::load(p)?,
        None => QuerySet::from_corpus(corpus)?,
    })
}

fn generate(a: GenerateArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => GenConfig::load(p)?,
        None => GenConfig::with_types(100, 5, 0),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.n_docs {
        cfg.n_docs = n;
    }
    let docs = generate_corpus(&cfg)?;
    save_corpus(&docs, &a.out)?;
    let mut m = RunManifest::new("generate", argv, json!({ "generator": to_json(&cfg) })).seed("generator", cfg.seed);
    if let Some(p) = &a.config {
        m = m.input(p)?;
    }
    m = m.output(&a.out)?;
    if let Some(q) = &a.queries_out {
        QuerySet::new(cfg.entity_types.iter().map(|t| t.name.clone()))?.save(q)?;
        m = m.output(q)?;
    }
    m.write(&manifest_path(&a.out))?;
    println!("wrote {} documents to {}", docs.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    let corpus = load_corpus(&a.corpus)?;
    let queries = load_queries(a.queries.as_deref(), &corpus)?;
    let subset = few_shot_split(&corpus, a.fraction, a.seed)?;
    let model_cfg = a.model.config(a.seed);
    let train_cfg = a.training.config(a.head, a.seed);
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = String::new();
    let out = train_with(&subset, &queries, &model_cfg, &train_cfg, |entry, _| {
        log.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        log.push('\n');
    })?;
    save_checkpoint(&out.model, Some(&train_cfg), &a.out)?;
    fs::write(&log_path, &log).map_err(|e| CliError::io(&log_path, e))?;
    let mut m = RunManifest::new(
        "train",
        argv,
        json!({
            "model": to_json(&model_cfg),
            "train": to_json(&train_cfg),
            "queries": queries.names(),
            "fraction": a.fraction,
            "documents": subset.len(),
        }),
    )
    .seed("init", model_cfg.seed)
    .seed("shuffle", train_cfg.seed)
    .seed("few_shot", a.seed)
    .input(&a.corpus)?;
    if let Some(q) = &a.queries {
        m = m.input(q)?;
    }
    m.output(&a.out)?.output(&log_path)?.write(&manifest_path(&a.out))?;
    if let Some(last) = out.log.last() {
        println!("epoch {} mean loss {:.6}", last.epoch, last.mean_loss);
    }
    println!("wrote checkpoint {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs, argv: &[String]) -> CliResult<()> {
    let gold = load_corpus(&a.corpus)?;
    let mut m;
    let model = match (&a.checkpoint, &a.train) {
        (Some(path), _) => {
            let ckpt = load_checkpoint(path)?;
            if let Some(head) = a.head {
                if head != ckpt.model.head_kind() {
                    return Err(CliError::Usage(format!(
                        "--head {head} does not match the checkpoint's {} head",
                        ckpt.model.head_kind()
                    )));
                }
            }
            m = RunManifest::new("eval", argv, json!({ "model": to_json(&ckpt.model.config) })).input(path)?;
            ckpt.model
        }
        (None, Some(path)) => {
            let corpus = load_corpus(path)?;
            let queries = QuerySet::from_corpus(&corpus)?;
            let subset = few_shot_split(&corpus, a.fraction, a.seed)?;
            let head = a.head.unwrap_or(HeadKind::Uner);
            let model_cfg = a.model.config(a.seed);
            let train_cfg = a.training.config(head, a.seed);
            let out = train_with(&subset, &queries, &model_cfg, &train_cfg, |_, _| {})?;
            m = RunManifest::new(
                "eval",
                argv,
                json!({
                    "model": to_json(&model_cfg),
                    "train": to_json(&train_cfg),
                    "fraction": a.fraction,
                    "documents": subset.len(),
                }),
            )
            .seed("init", model_cfg.seed)
            .seed("shuffle", train_cfg.seed)
            .seed("few_shot", a.seed)
            .input(path)?;
            out.model
        }
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --train".into())),
    };
    let (report, preds): (EvalReport, Vec<PredictedDocument>) = evaluate(&model, &gold)?;
    let mut text = report.to_json_line();
    text.push('\n');
    fs::write(&a.out, text).map_err(|e| CliError::io(&a.out, e))?;
    m = m.input(&a.corpus)?.output(&a.out)?;
    if let Some(p) = &a.predictions {
        save_predictions(&preds, p)?;
        m = m.output(p)?;
    }
    m.write(&manifest_path(&a.out))?;
    print!("{report}");
    Ok(())
}

fn decode(a: DecodeArgs, argv: &[String]) -> CliResult<()> {
    let mut model = load_checkpoint(&a.checkpoint)?.model;
    let corpus = load_corpus(&a.corpus)?;
    if let Some(q) = &a.queries {
        let queries = QuerySet::load(q)?;
        if model.head_kind() == HeadKind::Bio && queries != model.queries {
            return Err(CliError::Usage("a BIO checkpoint only decodes the types it was trained on".into()));
        }
        model.queries = queries;
    }
    let preds = model.predict_corpus(&corpus)?;
    let docs: Vec<PredictedDocument> = corpus
        .iter()
        .zip(preds)
        .map(|(d, p)| PredictedDocument::new(d, p))
        .collect();
    save_predictions(&docs, &a.out)?;
    let mut m = RunManifest::new("decode", argv, json!({ "queries": model.queries.names() }))
        .input(&a.checkpoint)?
        .input(&a.corpus)?;
    if let Some(q) = &a.queries {
        m = m.input(q)?;
    }
    m.output(&a.out)?.write(&manifest_path(&a.out))?;
    println!(
        "wrote {} entities for {} documents to {}",
        docs.iter().map(|d| d.entities.len()).sum::<usize>(),
        docs.len(),
        a.out.display()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs, argv: &[String]) -> CliResult<()> {
    let docs = match &a.corpus {
        Some(p) => load_corpus(p)?,
        None => generate_corpus(&GenConfig {
            tokens_per_doc: [8, 8],
            ..GenConfig::with_types(1, 2, a.seed)
        })?,
    };
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => Model::new(a.model.config(a.seed), a.head, QuerySet::from_corpus(&docs)?)?,
    };
    let report = check_model(&model, &docs, a.probes, a.epsilon, a.seed)?;
    if let Some(out) = &a.out {
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        fs::write(out, text).map_err(|e| CliError::io(out, e))?;
        let mut m = RunManifest::new(
            "gradcheck",
            argv,
            json!({
                "model": to_json(&model.config),
                "head": model.head_kind(),
                "probes": a.probes,
                "epsilon": a.epsilon,
            }),
        )
        .seed("probes", a.seed);
        for p in a.checkpoint.iter().chain(&a.corpus) {
            m = m.input(p)?;
        }
        m.output(out)?.write(&manifest_path(out))?;
    }
    println!(
        "max relative error {:.3e} over {} probes in {} tensors",
        report.max_rel_error,
        report.probes.len(),
        report.tensors_probed().len()
    );
    if report.passes(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

fn benchmark(a: BenchmarkArgs, argv: &[String]) -> CliResult<()> {
    let defaults = BenchmarkConfig::default();
    let cfg = BenchmarkConfig {
        seeds: a.seeds.clone(),
        n_train: a.n_train,
        n_test: a.n_test,
        train: TrainConfig {
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            ..defaults.train.clone()
        },
        ..defaults
    };
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let report = run_benchmark(&cfg, &mut |line| eprintln!("{line}"))?;
    let report_path = a.out.join("report.json");
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    fs::write(&report_path, text).map_err(|e| CliError::io(&report_path, e))?;
    let table_path = a.out.join("table.txt");
    fs::write(&table_path, report.to_string()).map_err(|e| CliError::io(&table_path, e))?;
    let mut m = RunManifest::new("benchmark", argv, json!({ "benchmark": to_json(&cfg) }));
    for &s in &cfg.seeds {
        m = m.seed(&format!("seed{s}"), s);
    }
    m.output(&report_path)?
        .output(&table_path)?
        .write(&a.out.join("manifest.json"))?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "{} benchmark criteria failed",
            report.criteria.iter().filter(|c| !c.passed).count()
        )))
    }
}

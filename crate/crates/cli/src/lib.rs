//! Command implementations behind the `faithpref` binary.

pub mod config;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use faithpref_core::pipeline::{
    load_corpus, load_pairs, write_json_line, DatasetManifest, DatasetSinks, Engine, PipelineError,
    SampleTrace,
};
use faithpref_core::prefloss::{
    import_preferences, synthetic_task, train_toy, SYNTHETIC_REFERENCE_SCALE,
};
use faithpref_core::Gateway;
use serde::Serialize;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("backend unreachable: {0}")]
    Backend(String),
    #[error("no records written")]
    NoRecords,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Backend(_) => 4,
            CliError::NoRecords => 5,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn pipeline_err(e: PipelineError) -> CliError {
    match e {
        PipelineError::Io(m) => CliError::Io(m),
        other => CliError::Config(other.to_string()),
    }
}

/// Build self-critiqued faithfulness preference data and train a toy
/// DPO+NLL policy on it.
#[derive(Debug, Parser)]
#[command(name = "faithpref", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides pipeline.rng_seed.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Overrides pipeline.workers.
    #[arg(long, global = true, value_name = "INT")]
    pub workers: Option<usize>,
    /// Write a per-sample trace (JSONL) next to the output.
    #[arg(long, global = true)]
    pub trace: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Construct a preference dataset from a document corpus.
    Construct(ConstructArgs),
    /// Score (document, summary) pairs with the configured critique.
    Score(ScoreArgs),
    /// Summarize, critique and refine each document at inference time.
    Refine(RefineArgs),
    /// Train the toy policy on preference JSONL (or the synthetic task).
    TrainToy(TrainArgs),
    /// Pretty-print a trace file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ConstructArgs {
    /// Input corpus, JSONL of {"id", "document"}.
    #[arg(long, value_name = "PATH")]
    pub corpus: Option<PathBuf>,
    /// Preference output, JSONL.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Optional SFT target output, JSONL of {"id", "document", "target"}.
    #[arg(long, value_name = "PATH")]
    pub sft_out: Option<PathBuf>,
    /// Trace output path; defaults to <out>.trace.jsonl when --trace is set.
    #[arg(long, value_name = "PATH")]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// JSONL of {"id", "document", "summary"}.
    #[arg(long, value_name = "PATH")]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Input corpus, JSONL of {"id", "document"}.
    #[arg(long, value_name = "PATH")]
    pub corpus: Option<PathBuf>,
    /// Output JSONL; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preference JSONL produced by `construct`.
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic")]
    pub prefs: Option<PathBuf>,
    /// Train on the built-in synthetic task (50 prompts, K=4) instead.
    #[arg(long)]
    pub synthetic: bool,
    /// Gradient-descent steps (overrides loss.steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate (overrides loss.lr).
    #[arg(long)]
    pub lr: Option<f64>,
    /// DPO temperature β (overrides loss.beta).
    #[arg(long)]
    pub beta: Option<f64>,
    /// NLL weight α (overrides loss.alpha).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Report output path; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Trace JSONL written by `construct --trace`.
    #[arg(value_name = "TRACE")]
    pub path: PathBuf,
}

/// Loads the config file (if any), applies flag overrides and validates.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.pipeline.rng_seed = seed;
    }
    if let Some(w) = global.workers {
        cfg.pipeline.workers = w;
    }
    if global.trace {
        cfg.io.trace = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required(
    opt: Option<PathBuf>,
    fallback: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, CliError> {
    opt.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("no {what} path given (flag or [io] config)")))
}

fn engine(cfg: &RunConfig) -> Result<Engine, CliError> {
    let backend = cfg.backend()?;
    let gateway = Gateway::from_config(backend).map_err(|e| CliError::Config(e.to_string()))?;
    Engine::new(
        Arc::new(gateway),
        Arc::new(cfg.prompt_set()?),
        cfg.critique.clone(),
        cfg.pipeline.clone(),
    )
    .map_err(pipeline_err)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    println!("{s}");
    Ok(())
}

pub async fn cmd_construct(
    cfg: &RunConfig,
    args: ConstructArgs,
) -> Result<DatasetManifest, CliError> {
    let corpus_path = required(args.corpus, &cfg.io.corpus, "corpus")?;
    let out_path = required(args.out, &cfg.io.output, "output")?;
    let corpus = load_corpus(open(&corpus_path)?).map_err(|e| match e {
        PipelineError::Io(m) => CliError::Io(m),
        other => CliError::Config(format!("{}: {other}", corpus_path.display())),
    })?;
    let engine = engine(cfg)?;

    let mut prefs = create(&out_path)?;
    let sft_path = args.sft_out.or_else(|| cfg.io.sft_output.clone());
    let mut sft = sft_path.as_deref().map(create).transpose()?;
    let trace_path = args
        .trace_out
        .or_else(|| cfg.io.trace_output.clone())
        .or_else(|| {
            cfg.io.trace.then(|| {
                let mut p = out_path.clone().into_os_string();
                p.push(".trace.jsonl");
                PathBuf::from(p)
            })
        });
    let mut trace = trace_path.as_deref().map(create).transpose()?;

    let manifest = engine
        .construct_dataset(
            &corpus,
            DatasetSinks {
                preferences: &mut prefs,
                sft: sft.as_mut().map(|w| w as &mut dyn Write),
                trace: trace.as_mut().map(|w| w as &mut dyn Write),
            },
            &cfg.fingerprint(),
        )
        .await
        .map_err(pipeline_err)?;
    Ok(manifest)
}

#[derive(Debug, Serialize)]
struct ScoreOutput {
    #[serde(flatten)]
    report: faithpref_core::pipeline::ScoreReport,
    config_fingerprint: String,
}

pub async fn cmd_score(cfg: &RunConfig, args: ScoreArgs) -> Result<(), CliError> {
    let path = required(args.pairs, &cfg.io.pairs, "pairs")?;
    let pairs = load_pairs(open(&path)?).map_err(pipeline_err)?;
    let engine = engine(cfg)?;
    let report = engine
        .score_corpus(&pairs, cfg.pipeline.critique_strategy)
        .await;
    let unreachable = !report.pairs.is_empty()
        && report.failures == report.pairs.len()
        && report.pairs.iter().all(|p| {
            p.error
                .as_deref()
                .is_some_and(|e| e.starts_with("transport failure"))
        });
    print_json(&ScoreOutput {
        report,
        config_fingerprint: cfg.fingerprint(),
    })?;
    if unreachable {
        return Err(CliError::Backend(
            "every scoring call failed to reach the backend".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RefineReport {
    documents: usize,
    refined: usize,
    failures: usize,
    config_fingerprint: String,
}

pub async fn cmd_refine(cfg: &RunConfig, args: RefineArgs) -> Result<(), CliError> {
    let corpus_path = required(args.corpus, &cfg.io.corpus, "corpus")?;
    let corpus = load_corpus(open(&corpus_path)?).map_err(pipeline_err)?;
    let engine = engine(cfg)?;
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut report = RefineReport {
        documents: corpus.len(),
        refined: 0,
        failures: 0,
        config_fingerprint: cfg.fingerprint(),
    };
    let mut transport_failures = 0;
    for doc in &corpus {
        match engine
            .refine_at_inference(doc, cfg.pipeline.critique_strategy)
            .await
        {
            Ok(outcome) => {
                report.refined += usize::from(outcome.refined);
                write_json_line(&mut out, &outcome).map_err(pipeline_err)?;
            }
            Err(e) => {
                report.failures += 1;
                let transport = matches!(&e, PipelineError::Generation(g) if g.is_transport());
                transport_failures += usize::from(transport);
                tracing::error!(document = %doc.id, error = %e, "summary generation failed");
            }
        }
    }
    out.flush().map_err(|e| CliError::Io(e.to_string()))?;
    drop(out);
    // The JSONL owns stdout unless --out was given.
    let summary = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    if args.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    if transport_failures == corpus.len() {
        return Err(CliError::Backend("no document could be summarized".into()));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainOutput {
    #[serde(flatten)]
    report: faithpref_core::prefloss::TrainingReport,
    config_fingerprint: String,
}

pub fn cmd_train_toy(cfg: &RunConfig, args: TrainArgs) -> Result<f64, CliError> {
    let mut train = cfg.loss.clone();
    train.steps = args.steps.unwrap_or(train.steps);
    train.lr = args.lr.unwrap_or(train.lr);
    train.beta = args.beta.unwrap_or(train.beta);
    train.alpha = args.alpha.unwrap_or(train.alpha);
    let (mut policy, dataset) = if args.synthetic {
        synthetic_task(50, 4, SYNTHETIC_REFERENCE_SCALE, cfg.pipeline.rng_seed)
            .map_err(|e| CliError::Config(e.to_string()))?
    } else {
        let path = required(args.prefs, &cfg.io.preferences, "preferences")?;
        let imported = import_preferences(open(&path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        (imported.policy, imported.dataset)
    };
    let report = train_toy(
        &mut policy,
        &dataset,
        train.loss_params(),
        train.steps,
        train.lr,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let accuracy = report.final_accuracy;
    let output = TrainOutput {
        report,
        config_fingerprint: cfg.fingerprint(),
    };
    match args.out.or_else(|| cfg.io.report.clone()) {
        Some(p) => {
            let mut w = create(&p)?;
            serde_json::to_writer_pretty(&mut w, &output)
                .map_err(|e| CliError::Io(e.to_string()))?;
            w.write_all(b"\n")
                .and_then(|_| w.flush())
                .map_err(io_err(&p))?;
        }
        None => print_json(&output)?,
    }
    eprintln!("final pairwise accuracy: {accuracy:.4}");
    Ok(accuracy)
}

pub fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    use std::io::BufRead;
    let reader = open(&args.path)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let w = |out: &mut io::StdoutLock, s: String| {
        writeln!(out, "{s}").map_err(|e| CliError::Io(e.to_string()))
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&args.path))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: SampleTrace = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("trace line {}: {e}", i + 1)))?;
        let score = t.score.map_or("-".to_string(), |s| format!("{s:.4}"));
        w(
            &mut out,
            format!("== {} #{}  score={score}", t.id, t.sample_index),
        )?;
        if let Some(s) = &t.initial {
            w(&mut out, format!("  initial : {s}"))?;
        }
        for v in &t.verdicts {
            w(
                &mut out,
                format!("  [{:<12}] {}", v.verdict.as_str(), v.fact.text),
            )?;
        }
        if let Some(f) = &t.feedback {
            for (j, l) in f.lines().enumerate() {
                let label = if j == 0 {
                    "  feedback: "
                } else {
                    "            "
                };
                w(&mut out, format!("{label}{l}"))?;
            }
        }
        if let Some(r) = &t.refined {
            w(&mut out, format!("  refined : {r}"))?;
        }
        if let Some(e) = &t.error {
            w(&mut out, format!("  error   : {e}"))?;
        }
    }
    Ok(())
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Inspect(args) = cli.command {
        return cmd_inspect(args);
    }
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Construct(args) => {
            let manifest = cmd_construct(&cfg, args).await?;
            print_json(&manifest)?;
            if manifest.records_written == 0 {
                return Err(if manifest.backend_unreachable() {
                    CliError::Backend("every document failed to reach the backend".into())
                } else {
                    CliError::NoRecords
                });
            }
            Ok(())
        }
        Command::Score(args) => cmd_score(&cfg, args).await,
        Command::Refine(args) => cmd_refine(&cfg, args).await,
        Command::TrainToy(args) => cmd_train_toy(&cfg, args).map(|_| ()),
        Command::Inspect(_) => unreachable!("handled above"),
    }
}

pub fn exit_with(result: Result<(), CliError>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `ctlmap` command-line interface.
//!
//! Data goes to stdout and diagnostics to stderr. Exit status is 0 on
//! success, 1 on runtime or data errors and 2 on invalid usage.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use ctlmap::active_learning::FeedbackRecord;
use ctlmap::corpus::{
    load_control_catalog, load_techspec_dataset, ControlCatalog, DataFormat, DatasetOptions, StopwordList,
};
use ctlmap::evaluation::{
    labeled_texts, run_sweep, simulate_feedback_experiment, EvalConfig, EvalError,
    FeedbackExperimentConfig, LabeledText,
};
use ctlmap::evaluation::plot::{feedback_chart, sweep_chart};
use ctlmap::fixtures::{self, FixtureConfig};
use ctlmap::hybrid::{Backend, MappingQuery, MappingResult};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::ServiceConfig;
use crate::engine::{Access, Engine, EngineError};

#[derive(Debug, Parser)]
#[command(name = "ctlmap", version, about = "Map technical checks to regulation controls")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "CTLMAP_CONFIG")]
    pub config: Option<PathBuf>,
    /// Data directory; overrides the configuration and `DATA_DIR`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a control catalog or a labelled check dataset.
    Ingest(IngestArgs),
    /// Train the classifier of a regulation on its checks and feedback.
    Train {
        #[arg(long)]
        regulation: String,
    },
    /// Map one check to controls.
    Map {
        #[arg(long)]
        text: String,
        #[arg(long)]
        regulation: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        max_hits: Option<usize>,
    },
    /// Record reviewer feedback, retraining when due.
    Feedback(FeedbackArgs),
    /// Sweep thresholds over held-out folds and report precision/recall/F1.
    Eval(EvalArgs),
    /// Replay a labelled pool as reviewer feedback and track hybrid F1.
    SimulateFeedback(SimulateArgs),
    /// Report covered controls and gaps of a regulation.
    Coverage {
        #[arg(long)]
        regulation: String,
        /// Emit per-family CSV instead of a summary.
        #[arg(long)]
        csv: bool,
    },
    /// Print engine status.
    Status,
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
    /// Write the synthetic fixture corpus.
    #[command(hide = true)]
    GenerateFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, conflicts_with = "checks", required_unless_present = "checks")]
    pub catalog: Option<PathBuf>,
    #[arg(long, requires = "regulation")]
    pub checks: Option<PathBuf>,
    #[arg(long)]
    pub regulation: Option<String>,
    /// Overwrite an already ingested regulation.
    #[arg(long)]
    pub replace: bool,
    /// `jsonl` or `csv`; guessed from the extension when omitted.
    #[arg(long)]
    pub format: Option<DataFormat>,
}

#[derive(Debug, Args)]
pub struct FeedbackArgs {
    #[arg(long, required_unless_present = "file")]
    pub regulation: Option<String>,
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    pub text: Option<String>,
    #[arg(long = "accept")]
    pub accept: Vec<String>,
    #[arg(long = "reject")]
    pub reject: Vec<String>,
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long, default_value = "")]
    pub author: String,
    /// JSONL file of feedback records.
    #[arg(long)]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CatalogSource {
    /// Catalog file; otherwise the ingested catalog of `--regulation` is used.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub regulation: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labelled checks to split into train and test folds.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub source: CatalogSource,
    /// Backends to evaluate; repeatable. Defaults to all three.
    #[arg(long = "backend", value_parser = parse_backend)]
    pub backends: Vec<Backend>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Hold out exactly one of `k` folds instead of a fixed fraction.
    #[arg(long, conflicts_with = "test_fraction")]
    pub fold: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Average per label instead of over all decisions.
    #[arg(long = "macro")]
    pub macro_average: bool,
    /// Write the sweep CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write an SVG precision/recall chart.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Store the report in the data directory under this id.
    #[arg(long)]
    pub experiment_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Labelled checks replayed as feedback.
    #[arg(long)]
    pub pool: PathBuf,
    /// Labelled checks the initial model is trained on.
    #[arg(long)]
    pub train_data: PathBuf,
    /// Held-out labelled checks scored after every chunk.
    #[arg(long)]
    pub eval: PathBuf,
    #[command(flatten)]
    pub source: CatalogSource,
    /// Feedback chunk size; defaults to the configured retrain interval.
    #[arg(long)]
    pub y: Option<usize>,
    /// Number of chunks; the pool must hold exactly `y` times this many.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub experiment_id: Option<String>,
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse::<Backend>().map_err(|e| e.to_string())
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: EngineError },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Engine(e) | CliError::File { source: e, .. } => match e {
                EngineError::InvalidThreshold(_) | EngineError::InvalidRequest(_) | EngineError::Config(_) => 2,
                _ => 1,
            },
            CliError::Eval(EvalError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }

    fn to_json(&self) -> Value {
        let (code, details) = match self {
            CliError::Usage(_) => ("Usage", json!({})),
            CliError::Engine(e) => (e.code(), e.details()),
            CliError::File { path, source } => {
                let mut d = source.details();
                d["path"] = json!(path);
                (source.code(), d)
            }
            CliError::Eval(EvalError::PoolSizeMismatch { pool, y }) => ("PoolSizeMismatch", json!({ "pool": pool, "y": y })),
            CliError::Eval(EvalError::DatasetTooSmall { size, k }) => ("DatasetTooSmall", json!({ "size": size, "k": k })),
            CliError::Eval(_) => ("Evaluation", json!({})),
            CliError::Io(_) => ("Io", json!({})),
        };
        json!({ "code": code, "message": self.to_string(), "details": details })
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `args` and runs the command.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<ServiceConfig> {
    let mut config = ServiceConfig::load(cli.config.as_deref())?;
    if let Some(dir) = &cli.data_dir {
        config.data_dir = dir.clone();
    }
    Ok(config)
}

fn emit(json: bool, value: &Value, human: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> CliResult<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if json {
        serde_json::to_writer_pretty(&mut out, value).map_err(io::Error::other)?;
        writeln!(out)?;
    } else {
        human(&mut out)?;
    }
    Ok(())
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or_default()
}

fn format_of(path: &Path, explicit: Option<DataFormat>) -> DataFormat {
    explicit.unwrap_or_else(|| DataFormat::from_path(path))
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: e.into(),
    })
}

pub fn run(cli: Cli) -> CliResult<()> {
    let config = load_config(&cli)?;
    let json = cli.json;
    match cli.command {
        Command::Ingest(args) => ingest(config, json, args),
        Command::Train { regulation } => {
            let engine = Engine::open(config, Access::ReadWrite)?;
            let summary = engine.train(&regulation)?;
            emit(json, &to_value(&summary), |out| {
                writeln!(
                    out,
                    "trained {} generation {} on {} examples (loss {:.4} -> {:.4}, {:.1}s)",
                    summary.regulation_id,
                    summary.generation,
                    summary.examples,
                    summary.initial_loss,
                    summary.final_loss,
                    summary.seconds
                )
            })
        }
        Command::Map {
            text,
            regulation,
            threshold,
            max_hits,
        } => {
            let threshold = threshold.unwrap_or(config.default_threshold);
            if !(0.0..=1.0).contains(&threshold) {
                return Err(EngineError::InvalidThreshold(threshold).into());
            }
            let max_hits = max_hits.unwrap_or(config.max_hits);
            let engine = Engine::open(config, Access::ReadOnly)?;
            let result = engine.map(&MappingQuery {
                text,
                regulation_id: regulation,
                threshold,
                max_hits,
            })?;
            emit(json, &to_value(&result), |out| print_mapping(out, &result))
        }
        Command::Feedback(args) => feedback(config, json, args),
        Command::Eval(args) => eval(config, json, args),
        Command::SimulateFeedback(args) => simulate(config, json, args),
        Command::Coverage { regulation, csv } => {
            let engine = Engine::open(config, Access::ReadOnly)?;
            let report = engine.coverage(&regulation)?;
            if csv {
                report
                    .write_family_csv(io::stdout().lock())
                    .map_err(|e| CliError::Io(io::Error::other(e)))?;
                return Ok(());
            }
            emit(json, &to_value(&report), |out| {
                writeln!(
                    out,
                    "{}: {} of {} controls covered ({:.1}%)",
                    report.regulation_id,
                    report.covered.len(),
                    report.covered.len() + report.gaps.len(),
                    report.coverage_ratio * 100.0
                )?;
                for (family, f) in &report.per_family {
                    writeln!(out, "  {family:<8} {:>4}/{:<4}", f.covered, f.total)?;
                }
                if !report.gaps.is_empty() {
                    let gaps: Vec<&str> = report.gaps.iter().map(String::as_str).collect();
                    writeln!(out, "gaps: {}", gaps.join(", "))?;
                }
                Ok(())
            })
        }
        Command::Status => {
            let engine = Engine::open(config, Access::ReadOnly)?;
            let status = engine.status();
            emit(json, &to_value(&status), |out| {
                writeln!(out, "{} regulation(s)", status.regulations_loaded)?;
                for r in &status.regulations {
                    writeln!(
                        out,
                        "  {}: {} controls, {} indexed documents, model generation {}, {} feedback ({} pending, {} retrains)",
                        r.regulation_id,
                        r.controls,
                        r.index_documents,
                        r.model_generation,
                        r.total_feedback,
                        r.pending_feedback,
                        r.retrains
                    )?;
                }
                Ok(())
            })
        }
        Command::Serve { listen } => {
            let addr = listen.unwrap_or(config.listen_address);
            let engine = Arc::new(Engine::open(config, Access::ReadWrite)?);
            let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            runtime.block_on(crate::http::serve(engine, addr, |bound| {
                eprintln!("listening on {bound}");
            }))?;
            Ok(())
        }
        Command::GenerateFixtures { out, seed } => {
            let mut fc = FixtureConfig::default();
            if let Some(seed) = seed {
                fc.seed = seed;
            }
            fixtures::generate(&fc).write_dir(&out)?;
            emit(json, &json!({ "out": out, "files": fixtures::FIXTURE_FILES }), |o| {
                writeln!(o, "wrote fixtures to {}", out.display())
            })
        }
    }
}

fn print_mapping(out: &mut dyn Write, result: &MappingResult) -> io::Result<()> {
    if result.results.is_empty() {
        writeln!(out, "no controls at threshold {}", result.threshold)?;
    }
    for e in &result.results {
        let provenance = to_value(&e.provenance);
        writeln!(
            out,
            "{:<16} {:.3}  {}",
            e.control_id,
            e.confidence,
            provenance.as_str().unwrap_or_default()
        )?;
    }
    Ok(())
}

fn ingest(config: ServiceConfig, json: bool, args: IngestArgs) -> CliResult<()> {
    let engine = Engine::open(config, Access::ReadWrite)?;
    let summary = match (&args.catalog, &args.checks) {
        (Some(path), _) => {
            let body = read_file(path)?;
            engine
                .ingest_catalog(&body, format_of(path, args.format), args.regulation.as_deref(), args.replace)
                .map_err(|source| CliError::File {
                    path: path.clone(),
                    source,
                })?
        }
        (None, Some(path)) => {
            let regulation = args.regulation.as_deref().unwrap_or_default();
            let body = read_file(path)?;
            engine
                .ingest_checks(regulation, &body, format_of(path, args.format))
                .map_err(|source| CliError::File {
                    path: path.clone(),
                    source,
                })?
        }
        (None, None) => return Err(CliError::Usage("pass --catalog or --checks".into())),
    };
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    emit(json, &to_value(&summary), |out| {
        for r in &summary.regulations {
            writeln!(out, "{}: {} records loaded", r.regulation_id, r.loaded)?;
        }
        if summary.rejected > 0 {
            writeln!(out, "{} records rejected", summary.rejected)?;
        }
        Ok(())
    })
}

fn feedback(config: ServiceConfig, json: bool, args: FeedbackArgs) -> CliResult<()> {
    let records: Vec<FeedbackRecord> = match &args.file {
        Some(path) => {
            let text = String::from_utf8(read_file(path)?).map_err(|e| CliError::Usage(e.to_string()))?;
            let mut records = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record = serde_json::from_str(line).map_err(|e| CliError::File {
                    path: path.clone(),
                    source: EngineError::InvalidFeedback(format!("line {}: {e}", i + 1)),
                })?;
                records.push(record);
            }
            records
        }
        None => {
            let now = Utc::now();
            vec![FeedbackRecord {
                feedback_id: args
                    .id
                    .clone()
                    .unwrap_or_else(|| format!("cli-{}", now.format("%Y%m%dT%H%M%S%.6f"))),
                regulation_id: args.regulation.clone().unwrap_or_default(),
                check_text: args.text.clone().unwrap_or_default(),
                accepted: args.accept.iter().cloned().collect(),
                rejected: args.reject.iter().cloned().collect(),
                submitted_at: now,
                author: args.author.clone(),
            }]
        }
    };
    let engine = Engine::open(config, Access::ReadWrite)?;
    let mut acks = Vec::new();
    for record in &records {
        let (mut ack, ticket) = engine.submit_feedback(record)?;
        if let Some(ticket) = ticket {
            eprintln!("retraining {} (generation {})", ticket.regulation_id(), ticket.generation());
            ack.model_generation = engine.run_retrain(ticket)?;
        }
        acks.push(ack);
    }
    let value = if acks.len() == 1 { to_value(&acks[0]) } else { to_value(&acks) };
    emit(json, &value, |out| {
        for a in &acks {
            writeln!(
                out,
                "{}: recorded ({} pending, model generation {})",
                a.feedback_id, a.pending, a.model_generation
            )?;
        }
        Ok(())
    })
}

/// Resolves the catalog from a file or from the data directory.
fn catalog_for(config: &ServiceConfig, source: &CatalogSource) -> CliResult<Arc<ControlCatalog>> {
    match (&source.catalog, &source.regulation) {
        (Some(path), reg) => {
            let controls = load_control_catalog(path, DataFormat::from_path(path)).map_err(|e| CliError::File {
                path: path.clone(),
                source: e.into(),
            })?;
            let mut groups = ControlCatalog::group(controls).map_err(|e| CliError::File {
                path: path.clone(),
                source: e.into(),
            })?;
            let id = match reg {
                Some(id) => id.clone(),
                None if groups.len() == 1 => groups.keys().next().cloned().unwrap_or_default(),
                None => return Err(CliError::Usage("catalog holds several regulations; pass --regulation".into())),
            };
            groups
                .remove(&id)
                .map(Arc::new)
                .ok_or_else(|| EngineError::UnknownRegulation(id).into())
        }
        (None, Some(id)) => Ok(Engine::open(config.clone(), Access::ReadOnly)?.catalog(id)?),
        (None, None) => Err(CliError::Usage("pass --catalog or --regulation".into())),
    }
}

fn load_labeled(path: &Path, catalog: &ControlCatalog) -> CliResult<Vec<LabeledText>> {
    let loaded = load_techspec_dataset(
        path,
        DataFormat::from_path(path),
        DatasetOptions {
            catalog: Some(catalog),
            strict: false,
        },
    )
    .map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    if !loaded.warnings.is_empty() {
        eprintln!(
            "warning: {}: {} label(s) outside `{}` ignored",
            path.display(),
            loaded.warnings.len(),
            catalog.regulation_id()
        );
    }
    let mut data = labeled_texts(&loaded.checks);
    for (_, labels) in &mut data {
        labels.retain(|l| catalog.contains(l));
    }
    Ok(data)
}

fn save_experiment(config: &ServiceConfig, id: Option<&str>, value: &Value) -> CliResult<()> {
    if let Some(id) = id {
        let engine = Engine::open(config.clone(), Access::ReadWrite)?;
        let path = engine.save_experiment(id, value)?;
        eprintln!("saved experiment {id} to {}", path.display());
    }
    Ok(())
}

fn eval(config: ServiceConfig, json: bool, args: EvalArgs) -> CliResult<()> {
    let catalog = catalog_for(&config, &args.source)?;
    let data = load_labeled(&args.data, &catalog)?;
    let defaults = EvalConfig::default();
    let eval_config = EvalConfig {
        k: args.k.unwrap_or(defaults.k),
        test_fraction: if args.fold { None } else { args.test_fraction.or(defaults.test_fraction) },
        thresholds: args.thresholds.clone().unwrap_or(defaults.thresholds),
        seed: args.seed.unwrap_or(defaults.seed),
        iterations: args.iterations.unwrap_or(defaults.iterations),
        macro_average: args.macro_average,
        max_hits: config.max_hits,
    };
    let backends = if args.backends.is_empty() {
        Backend::ALL.to_vec()
    } else {
        args.backends.clone()
    };
    let report = run_sweep(
        &data,
        catalog,
        &StopwordList::english(),
        &backends,
        &eval_config,
        &config.train,
    )?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    if let Some(path) = &args.plot {
        fs::write(path, sweep_chart(&report).render())?;
    }
    save_experiment(&config, args.experiment_id.as_deref(), &to_value(&report))?;
    match &args.out {
        Some(path) => {
            fs::write(path, &csv)?;
            emit(json, &to_value(&report), |out| {
                writeln!(
                    out,
                    "wrote {} ({} train / {} test per iteration)",
                    path.display(),
                    report.train_size,
                    report.test_size
                )
            })
        }
        None => emit(json, &to_value(&report), |out| out.write_all(&csv)),
    }
}

fn simulate(config: ServiceConfig, json: bool, args: SimulateArgs) -> CliResult<()> {
    let catalog = catalog_for(&config, &args.source)?;
    let pool = load_labeled(&args.pool, &catalog)?;
    let base = load_labeled(&args.train_data, &catalog)?;
    let eval_set = load_labeled(&args.eval, &catalog)?;
    let y = match (args.y, args.iterations) {
        (Some(y), _) => y,
        (None, Some(n)) if n > 0 => pool.len() / n,
        _ => config.feedback.y,
    };
    if let Some(n) = args.iterations {
        if y * n != pool.len() {
            return Err(EvalError::PoolSizeMismatch { pool: pool.len(), y }.into());
        }
    }
    let experiment = FeedbackExperimentConfig {
        y,
        threshold: args.threshold.unwrap_or(config.default_threshold),
        max_hits: config.max_hits,
        train: config.train.clone(),
    };
    let points = simulate_feedback_experiment(
        &base,
        &pool,
        &eval_set,
        catalog,
        &StopwordList::english(),
        &experiment,
    )?;
    let value = json!({ "config": experiment, "points": points });
    if let Some(path) = &args.plot {
        fs::write(path, feedback_chart(&points).render())?;
    }
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_vec_pretty(&value).map_err(io::Error::other)?)?;
    }
    save_experiment(&config, args.experiment_id.as_deref(), &value)?;
    emit(json, &value, |out| {
        writeln!(out, "iteration,precision,recall,f1,model_generation,retrains,feedback")?;
        for p in &points {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.iteration, p.precision, p.recall, p.f1, p.model_generation, p.retrains, p.feedback
            )?;
        }
        Ok(())
    })
}

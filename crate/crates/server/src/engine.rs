//! Persistent multi-regulation state shared by the HTTP service and the CLI.
//!
//! Layout of a data directory:
//!
//! ```text
//! events.jsonl                      structured event log
//! experiments/<id>.json             stored evaluation reports
//! regulations/<slug>/catalog.jsonl  controls
//! regulations/<slug>/training.jsonl labelled checks
//! regulations/<slug>/model.bin      latest classifier snapshot
//! regulations/<slug>/base.json      generation of the last offline training
//! regulations/<slug>/feedback.jsonl append-only reviewer feedback
//! ```
//!
//! Readers take the current [`RegulationSnapshot`] and never wait on writers.
//! Feedback for a regulation is serialized through one writer lock; retrains
//! run without it and install their model with a pointer swap.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Instant;

use chrono::{DateTime, Utc};
use ctlmap::active_learning::{ActiveLearner, FeedbackError, FeedbackLog, FeedbackRecord, RetrainJob, TrainingStore};
use ctlmap::analysis::{accepted_mappings, catalog_coverage, CoverageReport};
use ctlmap::classifier::{ClassifierError, CnnModel};
use ctlmap::corpus::{
    parse_control_catalog, parse_techspec_dataset, write_jsonl, ControlCatalog, CorpusError, DataFormat,
    DatasetOptions, RegulationControl, StopwordList, TechspecCheck,
};
use ctlmap::evaluation::{labeled_texts, EvalError, LabeledText};
use ctlmap::hybrid::{map_check_with, regulation_documents, HybridError, MappingOptions, MappingQuery, MappingResult, RegulationSnapshot};
use ctlmap::index::{IndexError, InvertedIndex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::ServiceConfig;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown regulation `{0}`")]
    UnknownRegulation(String),
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("regulation `{0}` is already ingested; pass replace=true to overwrite it")]
    RegulationExists(String),
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{source}")]
    Corpus {
        #[source]
        source: CorpusError,
    },
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error("duplicate feedback id `{0}`")]
    DuplicateFeedbackId(String),
    #[error("regulation `{0}` has nothing indexed")]
    EmptyIndex(String),
    #[error("no classifier has been trained for `{0}`")]
    ModelNotTrained(String),
    #[error("data directory {0} is in use by another writer")]
    Busy(PathBuf),
    #[error("engine was opened read-only")]
    ReadOnly,
    #[error("training failed: {0}")]
    Training(String),
    #[error("stored state is unreadable: {0}")]
    Storage(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

impl EngineError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::Config(_) => "Config",
            EngineError::UnknownRegulation(_) => "UnknownRegulation",
            EngineError::UnknownExperiment(_) => "UnknownExperiment",
            EngineError::RegulationExists(_) => "RegulationExists",
            EngineError::InvalidThreshold(_) => "InvalidThreshold",
            EngineError::InvalidRequest(_) => "InvalidRequest",
            EngineError::Corpus { source } => source.kind(),
            EngineError::InvalidFeedback(_) => "InvalidFeedback",
            EngineError::DuplicateFeedbackId(_) => "DuplicateFeedbackId",
            EngineError::EmptyIndex(_) => "EmptyIndex",
            EngineError::ModelNotTrained(_) => "ModelNotTrained",
            EngineError::Busy(_) => "Busy",
            EngineError::ReadOnly => "ReadOnly",
            EngineError::Training(_) => "Training",
            EngineError::Storage(_) => "Storage",
            EngineError::Io(_) => "Io",
        }
    }

    pub fn details(&self) -> Value {
        match self {
            EngineError::Corpus { source } => match source.line() {
                Some(line) => json!({ "line": line }),
                None => json!({}),
            },
            EngineError::InvalidThreshold(t) => json!({ "threshold": t }),
            EngineError::UnknownRegulation(id) | EngineError::RegulationExists(id) => json!({ "regulation_id": id }),
            EngineError::DuplicateFeedbackId(id) => json!({ "feedback_id": id }),
            EngineError::UnknownExperiment(id) => json!({ "experiment": id }),
            _ => json!({}),
        }
    }
}

impl From<CorpusError> for EngineError {
    fn from(source: CorpusError) -> Self {
        match source {
            CorpusError::Io(e) => EngineError::Io(e),
            source => EngineError::Corpus { source },
        }
    }
}

impl From<IndexError> for EngineError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Io(e) => EngineError::Io(e),
            e => EngineError::Storage(e.to_string()),
        }
    }
}

impl From<ClassifierError> for EngineError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::Io(e) => EngineError::Io(e),
            ClassifierError::Snapshot(m) => EngineError::Storage(m),
            e => EngineError::Training(e.to_string()),
        }
    }
}

impl From<FeedbackError> for EngineError {
    fn from(e: FeedbackError) -> Self {
        match e {
            FeedbackError::InvalidFeedback(m) => EngineError::InvalidFeedback(m),
            FeedbackError::DuplicateFeedbackId(id) => EngineError::DuplicateFeedbackId(id),
            FeedbackError::Io(e) => EngineError::Io(e),
            FeedbackError::Index(e) => e.into(),
            FeedbackError::Classifier(e) => e.into(),
            e => EngineError::Storage(e.to_string()),
        }
    }
}

impl From<HybridError> for EngineError {
    fn from(e: HybridError) -> Self {
        match e {
            HybridError::UnknownRegulation(id) => EngineError::UnknownRegulation(id),
            HybridError::InvalidThreshold(t) => EngineError::InvalidThreshold(t),
            HybridError::EmptyIndex => EngineError::EmptyIndex(String::new()),
            HybridError::Classifier(e) => e.into(),
            e => EngineError::InvalidRequest(e.to_string()),
        }
    }
}

impl From<EvalError> for EngineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Hybrid(e) => e.into(),
            EvalError::Classifier(e) => e.into(),
            EvalError::Feedback(e) => e.into(),
            EvalError::Io(e) => EngineError::Io(e),
            e => EngineError::InvalidRequest(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    ReadWrite,
    /// Loads state without locking, writing, or catch-up training.
    ReadOnly,
}

const CATALOG_FILE: &str = "catalog.jsonl";
const TRAINING_FILE: &str = "training.jsonl";
const MODEL_FILE: &str = "model.bin";
const BASE_FILE: &str = "base.json";
const FEEDBACK_FILE: &str = "feedback.jsonl";

/// Directory name for a regulation id.
pub fn regulation_slug(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

fn valid_experiment_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_'))
}

/// Writes `bytes` to `path` through a synced temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

/// Offline-training checkpoint: the feedback records before
/// `feedback_at_base` are already reflected in model `base_generation`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaseInfo {
    pub base_generation: u64,
    pub feedback_at_base: usize,
    pub trained_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedRegulation {
    pub regulation_id: String,
    pub loaded: usize,
    pub replaced: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub loaded: usize,
    pub rejected: usize,
    pub warnings: Vec<String>,
    pub regulations: Vec<IngestedRegulation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub regulation_id: String,
    pub generation: u64,
    pub examples: usize,
    pub vocab_size: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub accepted: bool,
    pub feedback_id: String,
    pub regulation_id: String,
    pub pending: usize,
    pub total_feedback: usize,
    pub model_generation: u64,
    pub index_generation: u64,
    pub retrain_scheduled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulationStatus {
    pub regulation_id: String,
    pub controls: usize,
    pub training_examples: usize,
    pub index_documents: usize,
    pub index_generation: u64,
    pub model_generation: u64,
    pub pending_feedback: usize,
    pub total_feedback: usize,
    pub retrains: usize,
    pub retrain_interval: usize,
    pub retrains_in_flight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemStatus {
    pub regulations_loaded: usize,
    /// Sum over regulations.
    pub index_generation: u64,
    /// Highest over regulations.
    pub model_generation: u64,
    pub pending_feedback: usize,
    pub total_feedback: usize,
    pub retrains: usize,
    pub retrains_in_flight: usize,
    pub uptime_seconds: f64,
    pub regulations: Vec<RegulationStatus>,
}

struct Writer {
    learner: ActiveLearner,
    index: Arc<InvertedIndex>,
    model: Option<Arc<CnnModel>>,
    log: Option<FeedbackLog>,
    records: Vec<FeedbackRecord>,
    in_flight: usize,
    training_examples: usize,
}

pub struct Regulation {
    id: String,
    dir: PathBuf,
    catalog: Arc<ControlCatalog>,
    snapshot: RwLock<Arc<RegulationSnapshot>>,
    writer: Mutex<Writer>,
    train_lock: Mutex<()>,
}

impl Regulation {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn snapshot(&self) -> Arc<RegulationSnapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn writer(&self) -> MutexGuard<'_, Writer> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn install(&self, w: &Writer) {
        let snap = RegulationSnapshot {
            catalog: self.catalog.clone(),
            index: w.index.clone(),
            model: w.model.clone(),
            stopwords: StopwordList::english(),
        };
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(snap);
    }
}

/// A retrain that must run before the model generation catches up.
pub struct RetrainTicket {
    regulation: Arc<Regulation>,
    job: RetrainJob,
}

impl RetrainTicket {
    pub fn regulation_id(&self) -> &str {
        &self.regulation.id
    }

    pub fn generation(&self) -> u64 {
        self.job.generation
    }
}

pub struct Engine {
    config: ServiceConfig,
    root: PathBuf,
    access: Access,
    _lock: Option<File>,
    regulations: RwLock<BTreeMap<String, Arc<Regulation>>>,
    ingest_lock: Mutex<()>,
    events: Mutex<Option<File>>,
    started: Instant,
}

fn read_catalog(path: &Path) -> Result<ControlCatalog> {
    let controls = parse_control_catalog(File::open(path)?, DataFormat::Jsonl, &StopwordList::english())?;
    Ok(ControlCatalog::new(controls)?)
}

/// Keeps only labels that resolve in the catalog, reporting the rest.
fn resolve_labels(checks: &mut [TechspecCheck], catalog: &ControlCatalog, warnings: &mut Vec<String>) {
    for c in checks {
        let unknown: Vec<String> = c.labels.iter().filter(|l| !catalog.contains(l)).cloned().collect();
        for l in unknown {
            warnings.push(format!("check `{}`: dropped unknown label `{l}`", c.check_id));
            c.labels.remove(&l);
        }
    }
}

fn read_training(path: &Path, catalog: &ControlCatalog) -> Result<Vec<LabeledText>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut loaded = parse_techspec_dataset(File::open(path)?, DataFormat::Jsonl, DatasetOptions::default())?;
    resolve_labels(&mut loaded.checks, catalog, &mut Vec::new());
    Ok(labeled_texts(&loaded.checks))
}

fn read_base(path: &Path) -> Result<BaseInfo> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| EngineError::Storage(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(BaseInfo::default()),
        Err(e) => Err(e.into()),
    }
}

fn ensure_fit(
    examples: &[LabeledText],
    catalog: &ControlCatalog,
    config: &ServiceConfig,
    generation: u64,
) -> Result<(CnnModel, ctlmap::classifier::FitReport)> {
    Ok(CnnModel::fit(
        examples,
        catalog.label_space(),
        StopwordList::english(),
        &config.train,
        generation,
    )?)
}

impl Engine {
    pub fn open(config: ServiceConfig, access: Access) -> Result<Self> {
        config.validate()?;
        let root = config.data_dir.clone();
        let lock = match access {
            Access::ReadWrite => {
                fs::create_dir_all(root.join("regulations"))?;
                fs::create_dir_all(root.join("experiments"))?;
                let f = OpenOptions::new().create(true).truncate(false).write(true).open(root.join(".lock"))?;
                match f.try_lock() {
                    Ok(()) => Some(f),
                    Err(fs::TryLockError::WouldBlock) => return Err(EngineError::Busy(root)),
                    Err(fs::TryLockError::Error(e)) => return Err(e.into()),
                }
            }
            Access::ReadOnly => None,
        };
        let events = match access {
            Access::ReadWrite => Some(OpenOptions::new().create(true).append(true).open(root.join("events.jsonl"))?),
            Access::ReadOnly => None,
        };
        let engine = Engine {
            config,
            root,
            access,
            _lock: lock,
            regulations: RwLock::new(BTreeMap::new()),
            ingest_lock: Mutex::new(()),
            events: Mutex::new(events),
            started: Instant::now(),
        };
        let mut loaded = BTreeMap::new();
        let regs_dir = engine.root.join("regulations");
        if regs_dir.is_dir() {
            let mut dirs: Vec<PathBuf> = fs::read_dir(&regs_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(CATALOG_FILE).is_file())
                .collect();
            dirs.sort();
            for dir in dirs {
                let reg = engine.load_regulation(&dir)?;
                loaded.insert(reg.id.clone(), reg);
            }
        }
        engine.event("startup", None, json!({ "regulations": loaded.len() }));
        *engine.regulations.write().unwrap_or_else(|e| e.into_inner()) = loaded;
        Ok(engine)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn data_dir(&self) -> &Path {
        &self.root
    }

    fn event(&self, kind: &str, regulation_id: Option<&str>, details: Value) {
        let mut guard = self.events.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(f) = guard.as_mut() {
            let line = json!({
                "ts": Utc::now().to_rfc3339(),
                "event": kind,
                "regulation_id": regulation_id,
                "details": details,
            });
            let _ = writeln!(f, "{line}");
        }
    }

    fn require_writable(&self) -> Result<()> {
        match self.access {
            Access::ReadWrite => Ok(()),
            Access::ReadOnly => Err(EngineError::ReadOnly),
        }
    }

    /// Rebuilds a regulation from disk: index from catalog and training data,
    /// then the feedback log replayed on top. A model older than the replayed
    /// retrain count is retrained on the data of the last retrain point.
    fn load_regulation(&self, dir: &Path) -> Result<Arc<Regulation>> {
        let catalog = Arc::new(read_catalog(&dir.join(CATALOG_FILE))?);
        let id = catalog.regulation_id().to_string();
        let stopwords = StopwordList::english();
        let training = read_training(&dir.join(TRAINING_FILE), &catalog)?;
        let base = read_base(&dir.join(BASE_FILE))?;
        let (log, records) = match self.access {
            Access::ReadWrite => {
                let (log, records) = FeedbackLog::open(&dir.join(FEEDBACK_FILE))?;
                (Some(log), records)
            }
            Access::ReadOnly => (None, FeedbackLog::read(&dir.join(FEEDBACK_FILE))?),
        };

        let mut index = InvertedIndex::build(regulation_documents(&catalog, &training, &stopwords))?;
        let mut learner = ActiveLearner::new(
            catalog.clone(),
            stopwords.clone(),
            self.config.feedback,
            TrainingStore::from_examples(&training, &stopwords),
            base.base_generation,
        )?;
        let mut retrain_point: Option<Vec<LabeledText>> = None;
        for (i, record) in records.iter().enumerate() {
            if i < base.feedback_at_base {
                learner.absorb_logged(record, &mut index)?;
                continue;
            }
            let before = learner.state().retrains;
            learner.replay(record, &mut index)?;
            if learner.state().retrains > before {
                retrain_point = Some(learner.store().examples().to_vec());
            }
        }
        let expected = learner.state().current_model_generation;

        let model_path = dir.join(MODEL_FILE);
        let mut model = if model_path.exists() {
            Some(CnnModel::load(&model_path)?)
        } else {
            None
        };
        let current = model.as_ref().map_or(0, CnnModel::generation);
        if current < expected && self.access == Access::ReadWrite {
            if let Some(examples) = retrain_point {
                let started = Instant::now();
                let (m, report) = ensure_fit(&examples, &catalog, &self.config, expected)?;
                m.save(&model_path)?;
                self.event(
                    "retrain_catch_up",
                    Some(&id),
                    json!({
                        "generation": expected,
                        "examples": report.examples,
                        "final_loss": report.loss_history.last(),
                        "seconds": started.elapsed().as_secs_f64(),
                    }),
                );
                model = Some(m);
            }
        }

        let writer = Writer {
            learner,
            index: Arc::new(index),
            model: model.map(Arc::new),
            log,
            records,
            in_flight: 0,
            training_examples: training.len(),
        };
        let snapshot = RegulationSnapshot {
            catalog: catalog.clone(),
            index: writer.index.clone(),
            model: writer.model.clone(),
            stopwords,
        };
        let reg = Regulation {
            id,
            dir: dir.to_owned(),
            catalog,
            snapshot: RwLock::new(Arc::new(snapshot)),
            writer: Mutex::new(writer),
            train_lock: Mutex::new(()),
        };
        Ok(Arc::new(reg))
    }

    pub fn regulation(&self, id: &str) -> Result<Arc<Regulation>> {
        self.regulations
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownRegulation(id.to_string()))
    }

    pub fn regulation_ids(&self) -> Vec<String> {
        self.regulations.read().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect()
    }

    pub fn snapshot(&self, regulation_id: &str) -> Result<Arc<RegulationSnapshot>> {
        Ok(self.regulation(regulation_id)?.snapshot())
    }

    pub fn catalog(&self, regulation_id: &str) -> Result<Arc<ControlCatalog>> {
        Ok(self.regulation(regulation_id)?.catalog.clone())
    }

    /// Labelled training data of a regulation: the ingested checks merged with
    /// all feedback so far.
    pub fn training_examples(&self, regulation_id: &str) -> Result<Vec<LabeledText>> {
        let reg = self.regulation(regulation_id)?;
        let w = reg.writer();
        Ok(w.learner.store().examples().to_vec())
    }

    fn reload(&self, dir: &Path) -> Result<Arc<Regulation>> {
        let reg = self.load_regulation(dir)?;
        self.regulations
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(reg.id.clone(), reg.clone());
        Ok(reg)
    }

    /// Loads controls for one or more regulations. With `regulation_id`,
    /// rows of other regulations are rejected. Existing regulations are only
    /// overwritten with `replace`; their old directory is set aside.
    pub fn ingest_catalog(
        &self,
        body: &[u8],
        format: DataFormat,
        regulation_id: Option<&str>,
        replace: bool,
    ) -> Result<IngestSummary> {
        self.require_writable()?;
        let _guard = self.ingest_lock.lock().unwrap_or_else(|e| e.into_inner());
        let controls = parse_control_catalog(body, format, &StopwordList::english())?;
        let mut summary = IngestSummary::default();
        let kept: Vec<RegulationControl> = match regulation_id {
            Some(id) => {
                let (keep, drop): (Vec<_>, Vec<_>) = controls.into_iter().partition(|c| c.regulation_id == id);
                summary.rejected = drop.len();
                summary
                    .warnings
                    .extend(drop.iter().map(|c| format!("control `{}` belongs to `{}`, not `{id}`", c.control_id, c.regulation_id)));
                keep
            }
            None => controls,
        };
        if kept.is_empty() {
            return Err(CorpusError::EmptyCatalog.into());
        }
        let groups = ControlCatalog::group(kept)?;
        let existing = self.regulation_ids();
        for id in groups.keys() {
            let dir = self.root.join("regulations").join(regulation_slug(id));
            if !replace && (existing.contains(id) || dir.exists()) {
                return Err(EngineError::RegulationExists(id.clone()));
            }
        }
        for (id, catalog) in groups {
            let dir = self.root.join("regulations").join(regulation_slug(&id));
            let replaced = dir.exists();
            if replaced {
                let stamp = Utc::now().format("%Y%m%dT%H%M%S%.3f");
                fs::rename(&dir, dir.with_file_name(format!("{}.replaced-{stamp}", regulation_slug(&id))))?;
            }
            fs::create_dir_all(&dir)?;
            let mut bytes = Vec::new();
            write_jsonl(catalog.controls(), &mut bytes)?;
            write_atomic(&dir.join(CATALOG_FILE), &bytes)?;
            self.reload(&dir)?;
            self.event("ingest_catalog", Some(&id), json!({ "controls": catalog.len(), "replaced": replaced }));
            summary.loaded += catalog.len();
            summary.regulations.push(IngestedRegulation {
                regulation_id: id,
                loaded: catalog.len(),
                replaced,
            });
        }
        Ok(summary)
    }

    /// Replaces the labelled training checks of a regulation. Labels outside
    /// the catalog are dropped with a warning.
    pub fn ingest_checks(&self, regulation_id: &str, body: &[u8], format: DataFormat) -> Result<IngestSummary> {
        self.require_writable()?;
        let _guard = self.ingest_lock.lock().unwrap_or_else(|e| e.into_inner());
        let reg = self.regulation(regulation_id)?;
        let mut loaded = parse_techspec_dataset(
            body,
            format,
            DatasetOptions {
                catalog: None,
                strict: false,
            },
        )?;
        let mut summary = IngestSummary::default();
        resolve_labels(&mut loaded.checks, &reg.catalog, &mut summary.warnings);
        let mut bytes = Vec::new();
        write_jsonl(&loaded.checks, &mut bytes)?;
        write_atomic(&reg.dir.join(TRAINING_FILE), &bytes)?;
        self.reload(&reg.dir)?;
        self.event("ingest_checks", Some(regulation_id), json!({ "checks": loaded.checks.len() }));
        summary.loaded = loaded.checks.len();
        summary.regulations.push(IngestedRegulation {
            regulation_id: regulation_id.to_string(),
            loaded: loaded.checks.len(),
            replaced: true,
        });
        Ok(summary)
    }

    /// Trains a fresh model on the training checks plus all feedback so far
    /// and makes it the new base generation.
    pub fn train(&self, regulation_id: &str) -> Result<TrainSummary> {
        self.require_writable()?;
        let reg = self.regulation(regulation_id)?;
        let _t = reg.train_lock.lock().unwrap_or_else(|e| e.into_inner());
        let (examples, generation, feedback_at_base) = {
            let w = reg.writer();
            let installed = w.model.as_ref().map_or(0, |m| m.generation());
            let generation = installed.max(w.learner.state().current_model_generation) + 1;
            (w.learner.store().examples().to_vec(), generation, w.records.len())
        };
        let started = Instant::now();
        let (model, report) = ensure_fit(&examples, &reg.catalog, &self.config, generation)?;
        model.save(&reg.dir.join(MODEL_FILE))?;
        let base = BaseInfo {
            base_generation: generation,
            feedback_at_base,
            trained_at: Some(Utc::now()),
        };
        let bytes = serde_json::to_vec_pretty(&base).map_err(io::Error::other)?;
        write_atomic(&reg.dir.join(BASE_FILE), &bytes)?;
        let summary = TrainSummary {
            regulation_id: regulation_id.to_string(),
            generation,
            examples: report.examples,
            vocab_size: report.vocab_size,
            initial_loss: report.initial_loss,
            final_loss: report.loss_history.last().copied().unwrap_or(report.initial_loss),
            seconds: started.elapsed().as_secs_f64(),
        };
        self.event("train", Some(regulation_id), serde_json::to_value(&summary).unwrap_or_default());
        self.reload(&reg.dir)?;
        Ok(summary)
    }

    pub fn map(&self, query: &MappingQuery) -> Result<MappingResult> {
        let snapshot = self.snapshot(&query.regulation_id)?;
        if !(0.0..=1.0).contains(&query.threshold) {
            return Err(EngineError::InvalidThreshold(query.threshold));
        }
        map_check_with(query, &snapshot, &MappingOptions::default()).map_err(|e| match e {
            HybridError::EmptyIndex => EngineError::EmptyIndex(query.regulation_id.clone()),
            e => e.into(),
        })
    }

    /// Durably records feedback and applies it to the index. Returns a
    /// ticket when the record makes a retrain due; run it with
    /// [`Engine::run_retrain`], typically off the request path.
    pub fn submit_feedback(&self, record: &FeedbackRecord) -> Result<(FeedbackAck, Option<RetrainTicket>)> {
        self.require_writable()?;
        let reg = self.regulation(&record.regulation_id)?;
        let (ack, job) = {
            let mut guard = reg.writer();
            let w = &mut *guard;
            w.learner
                .submit_feedback(record, Arc::make_mut(&mut w.index), w.log.as_mut())?;
            w.records.push(record.clone());
            let job = w.learner.begin_retrain();
            if job.is_some() {
                w.in_flight += 1;
            }
            reg.install(w);
            let state = w.learner.state();
            let ack = FeedbackAck {
                accepted: true,
                feedback_id: record.feedback_id.clone(),
                regulation_id: record.regulation_id.clone(),
                pending: state.pending_since_retrain,
                total_feedback: state.total_feedback,
                model_generation: w.model.as_ref().map_or(0, |m| m.generation()),
                index_generation: w.index.generation(),
                retrain_scheduled: job.is_some(),
            };
            (ack, job)
        };
        self.event(
            "feedback",
            Some(&record.regulation_id),
            json!({
                "feedback_id": record.feedback_id,
                "accepted": record.accepted,
                "rejected": record.rejected,
                "pending": ack.pending,
                "index_generation": ack.index_generation,
            }),
        );
        Ok((ack, job.map(|job| RetrainTicket { regulation: reg, job })))
    }

    /// Trains the model a ticket asks for and installs it. A failed retrain
    /// leaves the previous model serving.
    pub fn run_retrain(&self, ticket: RetrainTicket) -> Result<u64> {
        let RetrainTicket { regulation: reg, job } = ticket;
        let _t = reg.train_lock.lock().unwrap_or_else(|e| e.into_inner());
        self.event(
            "retrain_started",
            Some(&reg.id),
            json!({ "generation": job.generation, "examples": job.examples.len() }),
        );
        let started = Instant::now();
        let trained = ensure_fit(&job.examples, &reg.catalog, &self.config, job.generation).and_then(|(m, report)| {
            let stale = reg.writer().model.as_ref().is_some_and(|cur| cur.generation() >= job.generation);
            if !stale {
                m.save(&reg.dir.join(MODEL_FILE))?;
            }
            Ok((m, report, stale))
        });
        let mut guard = reg.writer();
        let w = &mut *guard;
        w.in_flight = w.in_flight.saturating_sub(1);
        match trained {
            Ok((model, report, stale)) => {
                w.learner.finish_retrain(&job, true);
                if !stale {
                    w.model = Some(Arc::new(model));
                    reg.install(w);
                }
                drop(guard);
                self.event(
                    "retrain_completed",
                    Some(&reg.id),
                    json!({
                        "generation": job.generation,
                        "examples": report.examples,
                        "vocab_size": report.vocab_size,
                        "initial_loss": report.initial_loss,
                        "final_loss": report.loss_history.last(),
                        "seconds": started.elapsed().as_secs_f64(),
                        "installed": !stale,
                    }),
                );
                Ok(job.generation)
            }
            Err(e) => {
                w.learner.finish_retrain(&job, false);
                drop(guard);
                self.event(
                    "retrain_failed",
                    Some(&reg.id),
                    json!({ "generation": job.generation, "error": e.to_string() }),
                );
                Err(e)
            }
        }
    }

    pub fn coverage(&self, regulation_id: &str) -> Result<CoverageReport> {
        let reg = self.regulation(regulation_id)?;
        let accepted = accepted_mappings(&reg.writer().records);
        Ok(catalog_coverage(&reg.catalog, &accepted, Utc::now()))
    }

    pub fn feedback_records(&self, regulation_id: &str) -> Result<Vec<FeedbackRecord>> {
        Ok(self.regulation(regulation_id)?.writer().records.clone())
    }

    pub fn status(&self) -> SystemStatus {
        let regs: Vec<Arc<Regulation>> = self
            .regulations
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect();
        let regulations: Vec<RegulationStatus> = regs
            .iter()
            .map(|reg| {
                let w = reg.writer();
                let state = w.learner.state();
                RegulationStatus {
                    regulation_id: reg.id.clone(),
                    controls: reg.catalog.len(),
                    training_examples: w.training_examples,
                    index_documents: w.index.doc_count(),
                    index_generation: w.index.generation(),
                    model_generation: w.model.as_ref().map_or(0, |m| m.generation()),
                    pending_feedback: state.pending_since_retrain,
                    total_feedback: state.total_feedback,
                    retrains: state.retrains,
                    retrain_interval: self.config.feedback.y,
                    retrains_in_flight: w.in_flight,
                }
            })
            .collect();
        SystemStatus {
            regulations_loaded: regulations.len(),
            index_generation: regulations.iter().map(|r| r.index_generation).sum(),
            model_generation: regulations.iter().map(|r| r.model_generation).max().unwrap_or(0),
            pending_feedback: regulations.iter().map(|r| r.pending_feedback).sum(),
            total_feedback: regulations.iter().map(|r| r.total_feedback).sum(),
            retrains: regulations.iter().map(|r| r.retrains).sum(),
            retrains_in_flight: regulations.iter().map(|r| r.retrains_in_flight).sum(),
            uptime_seconds: self.started.elapsed().as_secs_f64(),
            regulations,
        }
    }

    fn experiment_path(&self, id: &str) -> Result<PathBuf> {
        if !valid_experiment_id(id) {
            return Err(EngineError::InvalidRequest(format!("invalid experiment id `{id}`")));
        }
        Ok(self.root.join("experiments").join(format!("{id}.json")))
    }

    pub fn save_experiment<T: Serialize>(&self, id: &str, report: &T) -> Result<PathBuf> {
        self.require_writable()?;
        let path = self.experiment_path(id)?;
        let bytes = serde_json::to_vec_pretty(report).map_err(io::Error::other)?;
        write_atomic(&path, &bytes)?;
        self.event("experiment_saved", None, json!({ "experiment": id }));
        Ok(path)
    }

    pub fn experiment(&self, id: &str) -> Result<Value> {
        let path = self.experiment_path(id)?;
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| EngineError::Storage(e.to_string())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(EngineError::UnknownExperiment(id.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn experiment_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("experiments");
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids: BTreeSet<String> = BTreeSet::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.insert(stem.to_string());
                }
            }
        }
        Ok(ids.into_iter().collect())
    }
}

//! Reviewer feedback: durable capture, immediate indexing of accepted
//! mappings, and classifier retraining every `y` records.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, CnnModel};
use crate::corpus::{preprocess, ControlCatalog, StopwordList, TechspecCheck};
use crate::index::{IndexError, IndexedDocument, InvertedIndex};

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error("duplicate feedback id `{0}`")]
    DuplicateFeedbackId(String),
    #[error("feedback log line {line} is corrupt: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("retrain interval y must be at least 1")]
    InvalidInterval,
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = FeedbackError> = std::result::Result<T, E>;

/// A reviewer's verdict on a proposed mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback_id: String,
    pub regulation_id: String,
    pub check_text: String,
    #[serde(default)]
    pub accepted: BTreeSet<String>,
    #[serde(default)]
    pub rejected: BTreeSet<String>,
    pub submitted_at: DateTime<Utc>,
    #[serde(default)]
    pub author: String,
}

impl FeedbackRecord {
    pub fn validate(&self, catalog: &ControlCatalog) -> Result<()> {
        let invalid = |m: String| Err(FeedbackError::InvalidFeedback(m));
        if self.feedback_id.trim().is_empty() {
            return invalid("feedback_id is empty".into());
        }
        if self.check_text.trim().is_empty() {
            return invalid("check_text is empty".into());
        }
        if self.regulation_id != catalog.regulation_id() {
            return invalid(format!(
                "record targets `{}`, expected `{}`",
                self.regulation_id,
                catalog.regulation_id()
            ));
        }
        if self.accepted.is_empty() && self.rejected.is_empty() {
            return invalid("no accepted or rejected controls".into());
        }
        if let Some(c) = self.accepted.intersection(&self.rejected).next() {
            return invalid(format!("`{c}` is both accepted and rejected"));
        }
        if let Some(c) = self
            .accepted
            .iter()
            .chain(&self.rejected)
            .find(|c| !catalog.contains(c))
        {
            return invalid(format!("unknown control `{c}`"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    /// Retrain interval in feedback records.
    pub y: usize,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig { y: 50 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerState {
    pub pending_since_retrain: usize,
    pub total_feedback: usize,
    pub current_model_generation: u64,
    pub retrains: usize,
}

/// Append-only JSONL log, one record per line, synced before `append` returns.
#[derive(Debug)]
pub struct FeedbackLog {
    path: PathBuf,
    file: File,
}

impl FeedbackLog {
    /// Opens (creating if needed) and replays the log. A torn final line left
    /// by an interrupted write is truncated away; corruption elsewhere is an
    /// error.
    pub fn open(path: &Path) -> Result<(Self, Vec<FeedbackRecord>)> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        if complete < bytes.len() {
            file.set_len(complete as u64)?;
            file.sync_all()?;
        }
        let records = parse_complete_lines(&bytes)?;
        file.seek(SeekFrom::End(0))?;
        Ok((
            FeedbackLog {
                path: path.to_owned(),
                file,
            },
            records,
        ))
    }

    /// Reads the complete records of a log without modifying it.
    pub fn read(path: &Path) -> Result<Vec<FeedbackRecord>> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        parse_complete_lines(&bytes)
    }

    pub fn append(&mut self, record: &FeedbackRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn parse_complete_lines(bytes: &[u8]) -> Result<Vec<FeedbackRecord>> {
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let mut records = Vec::new();
    for (i, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let record = serde_json::from_slice(line).map_err(|e| FeedbackError::CorruptLog {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Labelled texts the classifier is trained on: the base dataset plus
/// reviewer feedback. Texts are keyed by their preprocessed form, so feedback
/// on a known check edits that example's positive set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingStore {
    entries: Vec<(String, BTreeSet<String>)>,
    by_key: HashMap<String, usize>,
    feedback_examples: usize,
}

impl TrainingStore {
    pub fn from_checks(checks: &[TechspecCheck], stopwords: &StopwordList) -> Self {
        let mut store = TrainingStore::default();
        for c in checks {
            store.merge(c.specification_text(), &c.labels, &BTreeSet::new(), stopwords);
        }
        store
    }

    pub fn from_examples(examples: &[(String, BTreeSet<String>)], stopwords: &StopwordList) -> Self {
        let mut store = TrainingStore::default();
        for (text, labels) in examples {
            store.merge(text.clone(), labels, &BTreeSet::new(), stopwords);
        }
        store
    }

    fn merge(
        &mut self,
        text: String,
        add: &BTreeSet<String>,
        remove: &BTreeSet<String>,
        stopwords: &StopwordList,
    ) -> bool {
        let key = preprocess(&text, stopwords).render();
        match self.by_key.get(&key) {
            Some(&i) => {
                let labels = &mut self.entries[i].1;
                labels.extend(add.iter().cloned());
                labels.retain(|l| !remove.contains(l));
                false
            }
            None => {
                self.by_key.insert(key, self.entries.len());
                let labels = add.iter().filter(|l| !remove.contains(*l)).cloned().collect();
                self.entries.push((text, labels));
                true
            }
        }
    }

    /// Accepted labels join the example's positive set and rejected ones
    /// leave it. Rejection-only feedback on an unseen text becomes a
    /// negative-only example.
    pub fn apply_feedback(&mut self, record: &FeedbackRecord, stopwords: &StopwordList) {
        if self.merge(record.check_text.clone(), &record.accepted, &record.rejected, stopwords) {
            self.feedback_examples += 1;
        }
    }

    pub fn examples(&self) -> &[(String, BTreeSet<String>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Examples that came from feedback rather than the base dataset.
    pub fn feedback_examples(&self) -> usize {
        self.feedback_examples
    }

    pub fn labels_for(&self, text: &str, stopwords: &StopwordList) -> Option<&BTreeSet<String>> {
        let key = preprocess(text, stopwords).render();
        self.by_key.get(&key).map(|&i| &self.entries[i].1)
    }
}

/// Work handed to a trainer when a retrain is due.
#[derive(Debug, Clone)]
pub struct RetrainJob {
    pub examples: Vec<(String, BTreeSet<String>)>,
    pub generation: u64,
    consumed: usize,
}

/// Index document id used for an accepted feedback record.
pub fn feedback_doc_id(feedback_id: &str) -> String {
    format!("feedback:{feedback_id}")
}

/// Single-writer feedback pipeline for one regulation.
#[derive(Debug, Clone)]
pub struct ActiveLearner {
    catalog: Arc<ControlCatalog>,
    stopwords: StopwordList,
    config: FeedbackConfig,
    state: LearnerState,
    store: TrainingStore,
    seen: HashSet<String>,
    scheduled_generation: u64,
}

impl ActiveLearner {
    pub fn new(
        catalog: Arc<ControlCatalog>,
        stopwords: StopwordList,
        config: FeedbackConfig,
        store: TrainingStore,
        model_generation: u64,
    ) -> Result<Self> {
        if config.y == 0 {
            return Err(FeedbackError::InvalidInterval);
        }
        Ok(ActiveLearner {
            catalog,
            stopwords,
            config,
            state: LearnerState {
                current_model_generation: model_generation,
                ..LearnerState::default()
            },
            store,
            seen: HashSet::new(),
            scheduled_generation: model_generation,
        })
    }

    pub fn state(&self) -> LearnerState {
        self.state
    }

    pub fn config(&self) -> FeedbackConfig {
        self.config
    }

    pub fn store(&self) -> &TrainingStore {
        &self.store
    }

    pub fn catalog(&self) -> &Arc<ControlCatalog> {
        &self.catalog
    }

    pub fn has_seen(&self, feedback_id: &str) -> bool {
        self.seen.contains(feedback_id)
    }

    /// The index document an accepted record contributes, if any.
    pub fn document_for(&self, record: &FeedbackRecord) -> Option<IndexedDocument> {
        (!record.accepted.is_empty()).then(|| {
            IndexedDocument::new(
                feedback_doc_id(&record.feedback_id),
                &preprocess(&record.check_text, &self.stopwords),
                record.accepted.clone(),
            )
        })
    }

    /// Validates the record, makes it durable, adds accepted labels to the
    /// index as a new document, and updates the training store. Nothing is
    /// mutated if validation or the log write fails.
    pub fn submit_feedback(
        &mut self,
        record: &FeedbackRecord,
        index: &mut InvertedIndex,
        log: Option<&mut FeedbackLog>,
    ) -> Result<LearnerState> {
        record.validate(&self.catalog)?;
        if self.seen.contains(&record.feedback_id) {
            return Err(FeedbackError::DuplicateFeedbackId(record.feedback_id.clone()));
        }
        let doc = self.document_for(record);
        if let Some(doc) = &doc {
            if index.contains_doc(&doc.doc_id) {
                return Err(FeedbackError::DuplicateFeedbackId(record.feedback_id.clone()));
            }
        }
        if let Some(log) = log {
            log.append(record)?;
        }
        if let Some(doc) = doc {
            index.add_document(doc)?;
        }
        self.record_applied(record);
        Ok(self.state)
    }

    fn record_applied(&mut self, record: &FeedbackRecord) {
        self.store.apply_feedback(record, &self.stopwords);
        self.seen.insert(record.feedback_id.clone());
        self.state.total_feedback += 1;
        self.state.pending_since_retrain += 1;
    }

    /// Applies a record that is already in the log, without counting it
    /// towards the retrain cadence (it predates the installed base model).
    pub fn absorb_logged(&mut self, record: &FeedbackRecord, index: &mut InvertedIndex) -> Result<()> {
        self.submit_feedback(record, index, None)?;
        self.state.pending_since_retrain -= 1;
        Ok(())
    }

    pub fn retrain_due(&self) -> bool {
        self.state.pending_since_retrain >= self.config.y
    }

    /// Starts a retrain when one is due: snapshots the cumulative training
    /// data and resets the pending counter.
    pub fn begin_retrain(&mut self) -> Option<RetrainJob> {
        if !self.retrain_due() {
            return None;
        }
        self.scheduled_generation += 1;
        let consumed = self.state.pending_since_retrain;
        self.state.pending_since_retrain = 0;
        Some(RetrainJob {
            examples: self.store.examples().to_vec(),
            generation: self.scheduled_generation,
            consumed,
        })
    }

    /// Records the outcome of a job. A failed job puts its records back into
    /// the pending count so the next submission retries.
    pub fn finish_retrain(&mut self, job: &RetrainJob, succeeded: bool) {
        if succeeded {
            self.state.current_model_generation = self.state.current_model_generation.max(job.generation);
            self.state.retrains += 1;
        } else {
            self.state.pending_since_retrain += job.consumed;
            self.scheduled_generation = self.state.current_model_generation.max(self.scheduled_generation - 1);
        }
    }

    /// Synchronous retrain: when due, trains with `trainer` and returns the new
    /// model. On failure the state is left as if no retrain had started.
    pub fn maybe_retrain<F>(&mut self, trainer: F) -> Result<Option<CnnModel>>
    where
        F: FnOnce(&[(String, BTreeSet<String>)], u64) -> Result<CnnModel, ClassifierError>,
    {
        let Some(job) = self.begin_retrain() else {
            return Ok(None);
        };
        match trainer(&job.examples, job.generation) {
            Ok(model) => {
                self.finish_retrain(&job, true);
                Ok(Some(model.with_generation(job.generation)))
            }
            Err(e) => {
                self.finish_retrain(&job, false);
                Err(e.into())
            }
        }
    }

    /// Replays a logged record after a restart: same effects as submission,
    /// and a due retrain is counted without running it. Callers compare the
    /// installed model with `state().current_model_generation` afterwards.
    pub fn replay(&mut self, record: &FeedbackRecord, index: &mut InvertedIndex) -> Result<()> {
        self.submit_feedback(record, index, None)?;
        if let Some(job) = self.begin_retrain() {
            self.finish_retrain(&job, true);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RegulationControl;
    use chrono::TimeZone;

    fn catalog() -> Arc<ControlCatalog> {
        let controls = ["AC-6", "SC-13", "SC-28"]
            .iter()
            .map(|id| RegulationControl {
                regulation_id: "NIST".into(),
                control_id: id.to_string(),
                family: id[..2].into(),
                title: String::new(),
                text: format!("control text {id}"),
            })
            .collect();
        Arc::new(ControlCatalog::new(controls).unwrap())
    }

    fn record(id: &str, text: &str, accepted: &[&str], rejected: &[&str]) -> FeedbackRecord {
        FeedbackRecord {
            feedback_id: id.into(),
            regulation_id: "NIST".into(),
            check_text: text.into(),
            accepted: accepted.iter().map(|s| s.to_string()).collect(),
            rejected: rejected.iter().map(|s| s.to_string()).collect(),
            submitted_at: Utc.with_ymd_and_hms(2024, 1, 2, 3, 4, 5).unwrap(),
            author: "sme".into(),
        }
    }

    fn index() -> InvertedIndex {
        let sw = StopwordList::english();
        InvertedIndex::build([IndexedDocument::new(
            "c:AC-6",
            &preprocess("least privilege", &sw),
            ["AC-6".to_string()].into(),
        )])
        .unwrap()
    }

    fn learner(y: usize) -> ActiveLearner {
        ActiveLearner::new(
            catalog(),
            StopwordList::english(),
            FeedbackConfig { y },
            TrainingStore::default(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn accepted_feedback_is_indexed() {
        let mut l = learner(50);
        let mut idx = index();
        let s = l
            .submit_feedback(&record("f1", "data disks encrypted", &["SC-28"], &[]), &mut idx, None)
            .unwrap();
        assert_eq!(idx.doc_count(), 2);
        assert_eq!(idx.generation(), 2);
        assert_eq!(s.pending_since_retrain, 1);
        let hits = idx.search(&preprocess("disks", &StopwordList::english()), 5).unwrap();
        assert_eq!(hits[0].label, "SC-28");
    }

    #[test]
    fn rejection_only_feedback_does_not_touch_index() {
        let mut l = learner(50);
        let mut idx = index();
        let s = l
            .submit_feedback(&record("f1", "admins limited", &[], &["AC-6"]), &mut idx, None)
            .unwrap();
        assert_eq!(idx.doc_count(), 1);
        assert_eq!(idx.generation(), 1);
        assert_eq!(s.pending_since_retrain, 1);
        let labels = l.store().labels_for("admins limited", &StopwordList::english()).unwrap();
        assert!(labels.is_empty());
    }

    #[test]
    fn rejection_removes_label_from_known_example() {
        let mut l = learner(50);
        let mut idx = index();
        l.submit_feedback(&record("f1", "disks encrypted", &["SC-28", "SC-13"], &[]), &mut idx, None)
            .unwrap();
        l.submit_feedback(&record("f2", "Disks ENCRYPTED!", &[], &["SC-13"]), &mut idx, None)
            .unwrap();
        let labels = l.store().labels_for("disks encrypted", &StopwordList::english()).unwrap();
        assert_eq!(labels, &BTreeSet::from(["SC-28".to_string()]));
        assert_eq!(l.store().len(), 1);
    }

    #[test]
    fn invalid_and_duplicate_feedback() {
        let mut l = learner(50);
        let mut idx = index();
        let err = l
            .submit_feedback(&record("f1", "x", &["AC-6"], &["AC-6"]), &mut idx, None)
            .unwrap_err();
        assert!(matches!(err, FeedbackError::InvalidFeedback(_)));
        let err = l
            .submit_feedback(&record("f1", "x", &["ZZ-1"], &[]), &mut idx, None)
            .unwrap_err();
        assert!(matches!(err, FeedbackError::InvalidFeedback(_)));
        let err = l.submit_feedback(&record("f1", "x", &[], &[]), &mut idx, None).unwrap_err();
        assert!(matches!(err, FeedbackError::InvalidFeedback(_)));
        l.submit_feedback(&record("f1", "x", &["AC-6"], &[]), &mut idx, None).unwrap();
        let err = l
            .submit_feedback(&record("f1", "y", &["AC-6"], &[]), &mut idx, None)
            .unwrap_err();
        assert!(matches!(err, FeedbackError::DuplicateFeedbackId(_)));
        assert_eq!(l.state().total_feedback, 1);
    }

    #[test]
    fn zero_interval_rejected() {
        let err = ActiveLearner::new(
            catalog(),
            StopwordList::english(),
            FeedbackConfig { y: 0 },
            TrainingStore::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, FeedbackError::InvalidInterval));
    }

    #[test]
    fn retrain_fires_on_yth_record() {
        let mut l = learner(50);
        let mut idx = index();
        for i in 0..49 {
            l.submit_feedback(&record(&format!("f{i}"), "t", &["AC-6"], &[]), &mut idx, None)
                .unwrap();
            assert!(l.begin_retrain().is_none());
        }
        l.submit_feedback(&record("f49", "t", &["AC-6"], &[]), &mut idx, None).unwrap();
        let job = l.begin_retrain().expect("due");
        assert_eq!(job.generation, 2);
        assert_eq!(l.state().pending_since_retrain, 0);
        l.finish_retrain(&job, true);
        assert_eq!(l.state().current_model_generation, 2);
    }

    #[test]
    fn failed_retrain_restores_pending() {
        let mut l = learner(2);
        let mut idx = index();
        for i in 0..2 {
            l.submit_feedback(&record(&format!("f{i}"), "t", &["AC-6"], &[]), &mut idx, None)
                .unwrap();
        }
        let err = l
            .maybe_retrain(|_, _| Err(ClassifierError::EmptyTrainingSet))
            .unwrap_err();
        assert!(matches!(err, FeedbackError::Classifier(_)));
        assert_eq!(l.state().pending_since_retrain, 2);
        assert_eq!(l.state().current_model_generation, 1);
        assert!(l.retrain_due());
    }

    #[test]
    fn noop_when_not_due() {
        let mut l = learner(50);
        let mut idx = index();
        for i in 0..3 {
            l.submit_feedback(&record(&format!("f{i}"), "t", &["AC-6"], &[]), &mut idx, None)
                .unwrap();
        }
        let out = l.maybe_retrain(|_, _| unreachable!()).unwrap();
        assert!(out.is_none());
        assert_eq!(l.state().current_model_generation, 1);
    }

    #[test]
    fn log_round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feedback.jsonl");
        let (mut log, existing) = FeedbackLog::open(&path).unwrap();
        assert!(existing.is_empty());
        let a = record("f1", "disks", &["SC-28"], &[]);
        let b = record("f2", "admins", &[], &["AC-6"]);
        log.append(&a).unwrap();
        log.append(&b).unwrap();
        drop(log);

        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"feedback_id\":\"f3\",\"regul").unwrap();
        drop(f);

        let (mut log, records) = FeedbackLog::open(&path).unwrap();
        assert_eq!(records, vec![a.clone(), b.clone()]);
        let c = record("f3", "keys", &["SC-13"], &[]);
        log.append(&c).unwrap();
        drop(log);
        let (_, records) = FeedbackLog::open(&path).unwrap();
        assert_eq!(records, vec![a, b, c]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feedback.jsonl");
        std::fs::write(&path, "garbage\n{}\n").unwrap();
        assert!(matches!(
            FeedbackLog::open(&path),
            Err(FeedbackError::CorruptLog { line: 1, .. })
        ));
    }

    #[test]
    fn replay_reconstructs_state() {
        let records: Vec<_> = (0..7)
            .map(|i| record(&format!("f{i}"), &format!("text {i}"), &["SC-13"], &[]))
            .collect();
        let mut live = learner(3);
        let mut live_idx = index();
        for r in &records {
            live.submit_feedback(r, &mut live_idx, None).unwrap();
            live.maybe_retrain(|ex, g| {
                let (m, _) = CnnModel::fit(
                    ex,
                    catalog().label_space(),
                    StopwordList::english(),
                    &crate::classifier::TrainConfig {
                        dim: 4,
                        widths: vec![2],
                        n_filters: 2,
                        epochs: 1,
                        min_freq: 1,
                        ..Default::default()
                    },
                    g,
                )?;
                Ok(m)
            })
            .unwrap();
        }
        let mut replayed = learner(3);
        let mut idx = index();
        for r in &records {
            replayed.replay(r, &mut idx).unwrap();
        }
        assert_eq!(replayed.state(), live.state());
        assert_eq!(replayed.state().retrains, 2);
        assert_eq!(idx.generation(), live_idx.generation());
        assert_eq!(replayed.store(), live.store());
    }
}

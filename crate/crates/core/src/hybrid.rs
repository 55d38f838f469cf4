//! Fusion of search hits and classifier scores into one thresholded mapping.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, CnnModel, DEFAULT_SCORE_FLOOR};
use crate::corpus::{preprocess, ControlCatalog, StopwordList};
use crate::index::{IndexError, IndexedDocument, InvertedIndex, SearchHit};

pub const DEFAULT_MAX_HITS: usize = 20;

#[derive(Debug, Error)]
pub enum HybridError {
    #[error("unknown regulation `{0}`")]
    UnknownRegulation(String),
    #[error("the search index is empty")]
    EmptyIndex,
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("max_hits must be at least 1")]
    ZeroMaxHits,
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Index(IndexError),
}

impl From<IndexError> for HybridError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::EmptyIndex => HybridError::EmptyIndex,
            IndexError::ZeroMaxHits => HybridError::ZeroMaxHits,
            other => HybridError::Index(other),
        }
    }
}

pub type Result<T, E = HybridError> = std::result::Result<T, E>;

/// Which backend produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Search,
    Cnn,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    pub confidence: f64,
    pub provenance: Provenance,
}

/// How the two confidence maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum FusionRule {
    /// Union of labels, max confidence where both backends report one.
    #[default]
    Max,
    /// `alpha · search + (1 − alpha) · cnn`, a missing side counting as 0.
    Weighted { alpha: f64 },
}

pub fn fuse(search_hits: &[SearchHit], cnn_scores: &BTreeMap<String, f64>) -> BTreeMap<String, FusedScore> {
    fuse_with(FusionRule::Max, search_hits, cnn_scores)
}

pub fn fuse_with(
    rule: FusionRule,
    search_hits: &[SearchHit],
    cnn_scores: &BTreeMap<String, f64>,
) -> BTreeMap<String, FusedScore> {
    let mut pairs: BTreeMap<&str, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for hit in search_hits {
        pairs.entry(&hit.label).or_default().0 = Some(hit.confidence);
    }
    for (label, &score) in cnn_scores {
        pairs.entry(label).or_default().1 = Some(score);
    }
    pairs
        .into_iter()
        .map(|(label, (s, c))| {
            let provenance = match (s, c) {
                (Some(_), Some(_)) => Provenance::Both,
                (Some(_), None) => Provenance::Search,
                _ => Provenance::Cnn,
            };
            let confidence = match rule {
                FusionRule::Max => s.unwrap_or(0.0).max(c.unwrap_or(0.0)),
                FusionRule::Weighted { alpha } => {
                    alpha * s.unwrap_or(0.0) + (1.0 - alpha) * c.unwrap_or(0.0)
                }
            };
            (label.to_owned(), FusedScore { confidence, provenance })
        })
        .collect()
}

/// A mapping request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingQuery {
    pub text: String,
    pub regulation_id: String,
    pub threshold: f64,
    #[serde(default = "default_max_hits")]
    pub max_hits: usize,
}

fn default_max_hits() -> usize {
    DEFAULT_MAX_HITS
}

impl MappingQuery {
    pub fn new(text: impl Into<String>, regulation_id: impl Into<String>, threshold: f64) -> Self {
        MappingQuery {
            text: text.into(),
            regulation_id: regulation_id.into(),
            threshold,
            max_hits: DEFAULT_MAX_HITS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub control_id: String,
    pub confidence: f64,
    pub provenance: Provenance,
}

/// Ranked, thresholded controls for one query, stamped with the generations
/// of the index and model that answered it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingResult {
    pub query: String,
    pub regulation_id: String,
    pub threshold: f64,
    pub results: Vec<MappingEntry>,
    pub model_generation: u64,
    pub index_generation: u64,
}

impl MappingResult {
    pub fn control_ids(&self) -> impl Iterator<Item = &str> {
        self.results.iter().map(|e| e.control_id.as_str())
    }

    pub fn contains(&self, control_id: &str) -> bool {
        self.control_ids().any(|c| c == control_id)
    }
}

/// Scoring source used by [`score_labels`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Search,
    Cnn,
    Hybrid,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Search, Backend::Cnn, Backend::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Search => "search",
            Backend::Cnn => "cnn",
            Backend::Hybrid => "hybrid",
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "search" => Ok(Backend::Search),
            "cnn" => Ok(Backend::Cnn),
            "hybrid" => Ok(Backend::Hybrid),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingOptions {
    pub fusion: FusionRule,
    /// Classifier scores below this are not reported.
    pub score_floor: f64,
}

impl Default for MappingOptions {
    fn default() -> Self {
        MappingOptions {
            fusion: FusionRule::Max,
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }
}

/// An immutable (catalog, index, model) triple answering queries for one
/// regulation. Cheap to clone; readers hold it for the whole query.
#[derive(Debug, Clone)]
pub struct RegulationSnapshot {
    pub catalog: Arc<ControlCatalog>,
    pub index: Arc<InvertedIndex>,
    pub model: Option<Arc<CnnModel>>,
    pub stopwords: StopwordList,
}

impl RegulationSnapshot {
    pub fn regulation_id(&self) -> &str {
        self.catalog.regulation_id()
    }

    pub fn model_generation(&self) -> u64 {
        self.model.as_ref().map_or(0, |m| m.generation())
    }

    pub fn index_generation(&self) -> u64 {
        self.index.generation()
    }
}

/// Index documents for a regulation: every control's own text labelled with
/// itself, then each labelled training example in order.
pub fn regulation_documents(
    catalog: &ControlCatalog,
    examples: &[(String, BTreeSet<String>)],
    stopwords: &StopwordList,
) -> Vec<IndexedDocument> {
    let controls = catalog.controls().iter().map(|c| {
        IndexedDocument::new(
            format!("control:{}", c.control_id),
            &preprocess(&c.indexed_text(), stopwords),
            BTreeSet::from([c.control_id.clone()]),
        )
    });
    let checks = examples
        .iter()
        .enumerate()
        .filter(|(_, (_, labels))| !labels.is_empty())
        .map(|(i, (text, labels))| {
            IndexedDocument::new(format!("train:{i}"), &preprocess(text, stopwords), labels.clone())
        });
    controls.chain(checks).collect()
}

impl RegulationSnapshot {
    /// Indexes the catalog and `examples` and pairs them with `model`.
    pub fn build(
        catalog: Arc<ControlCatalog>,
        examples: &[(String, BTreeSet<String>)],
        model: Option<Arc<CnnModel>>,
        stopwords: StopwordList,
    ) -> Result<Self> {
        let index = InvertedIndex::build(regulation_documents(&catalog, examples, &stopwords))?;
        Ok(RegulationSnapshot {
            catalog,
            index: Arc::new(index),
            model,
            stopwords,
        })
    }
}

/// Unthresholded confidence per label from one backend. The hybrid backend
/// falls back to search alone while no model is installed.
pub fn score_labels(
    snapshot: &RegulationSnapshot,
    text: &str,
    backend: Backend,
    max_hits: usize,
    options: &MappingOptions,
) -> Result<BTreeMap<String, FusedScore>> {
    let search = || -> Result<Vec<SearchHit>> {
        let tokens = preprocess(text, &snapshot.stopwords);
        Ok(snapshot.index.search(&tokens, max_hits)?)
    };
    let cnn = |model: &CnnModel| -> Result<BTreeMap<String, f64>> {
        Ok(model.predict(text, options.score_floor)?)
    };
    Ok(match backend {
        Backend::Search => fuse_with(options.fusion, &search()?, &BTreeMap::new()),
        Backend::Cnn => {
            let model = snapshot.model.as_deref().ok_or(ClassifierError::ModelNotTrained)?;
            fuse_with(options.fusion, &[], &cnn(model)?)
        }
        Backend::Hybrid => {
            let hits = search()?;
            let scores = match snapshot.model.as_deref() {
                Some(model) => cnn(model)?,
                None => BTreeMap::new(),
            };
            fuse_with(options.fusion, &hits, &scores)
        }
    })
}

/// Entries with confidence ≥ threshold, by confidence descending then id.
pub fn rank_and_filter(scores: &BTreeMap<String, FusedScore>, threshold: f64) -> Vec<MappingEntry> {
    let mut entries: Vec<MappingEntry> = scores
        .iter()
        .filter(|(_, s)| s.confidence >= threshold)
        .map(|(id, s)| MappingEntry {
            control_id: id.clone(),
            confidence: s.confidence,
            provenance: s.provenance,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.control_id.cmp(&b.control_id))
    });
    entries
}

pub fn map_check(query: &MappingQuery, snapshot: &RegulationSnapshot) -> Result<MappingResult> {
    map_check_with(query, snapshot, &MappingOptions::default())
}

pub fn map_check_with(
    query: &MappingQuery,
    snapshot: &RegulationSnapshot,
    options: &MappingOptions,
) -> Result<MappingResult> {
    if query.regulation_id != snapshot.regulation_id() {
        return Err(HybridError::UnknownRegulation(query.regulation_id.clone()));
    }
    if !(0.0..=1.0).contains(&query.threshold) {
        return Err(HybridError::InvalidThreshold(query.threshold));
    }
    if snapshot.index.doc_count() == 0 {
        return Err(HybridError::EmptyIndex);
    }
    let scores = score_labels(snapshot, &query.text, Backend::Hybrid, query.max_hits, options)?;
    Ok(MappingResult {
        query: query.text.clone(),
        regulation_id: query.regulation_id.clone(),
        threshold: query.threshold,
        results: rank_and_filter(&scores, query.threshold),
        model_generation: snapshot.model_generation(),
        index_generation: snapshot.index_generation(),
    })
}

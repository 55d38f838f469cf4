use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{forward, CnnParams, CnnShape};
use super::train::{train, TrainConfig, TrainExample, TrainOutcome};
use super::vocab::Vocabulary;
use super::{ClassifierError, Result};
use crate::corpus::{preprocess, StopwordList};

/// Confidence below which a label is left out of a prediction.
pub const DEFAULT_SCORE_FLOOR: f64 = 0.01;

const SNAPSHOT_MAGIC: &[u8; 8] = b"CTLMAPM\0";
const SNAPSHOT_VERSION: u32 = 1;

/// A trained classifier bundled with everything needed to reproduce its
/// predictions: config, stopword version, vocabulary, and label ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    config: TrainConfig,
    stopwords: StopwordList,
    vocab: Vocabulary,
    labels: Vec<String>,
    label_index: HashMap<String, usize>,
    params: CnnParams,
    generation: u64,
}

/// Training summary returned alongside a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub examples: usize,
    pub vocab_size: usize,
    pub initial_loss: f64,
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    generation: u64,
    config: TrainConfig,
    stopword_version: String,
    vocabulary: Vec<String>,
    labels: Vec<String>,
    shape: CnnShape,
}

impl CnnModel {
    pub fn new(
        config: TrainConfig,
        stopwords: StopwordList,
        vocab: Vocabulary,
        labels: Vec<String>,
        params: CnnParams,
        generation: u64,
    ) -> Result<Self> {
        if params.shape().n_labels != labels.len() || params.shape().vocab_size != vocab.size() {
            return Err(ClassifierError::ShapeMismatch(format!(
                "params {:?} do not match {} labels / vocabulary of {}",
                params.shape(),
                labels.len(),
                vocab.size()
            )));
        }
        let label_index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Ok(CnnModel {
            config,
            stopwords,
            vocab,
            labels,
            label_index,
            params,
            generation,
        })
    }

    /// Preprocesses texts, builds the vocabulary from them, and trains.
    pub fn fit(
        examples: &[(String, BTreeSet<String>)],
        label_space: Vec<String>,
        stopwords: StopwordList,
        config: &TrainConfig,
        generation: u64,
    ) -> Result<(Self, FitReport)> {
        config.validate()?;
        if examples.is_empty() {
            return Err(ClassifierError::EmptyTrainingSet);
        }
        let label_index: HashMap<&str, usize> = label_space
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let streams: Vec<_> = examples
            .iter()
            .map(|(text, _)| preprocess(text, &stopwords))
            .collect();
        let vocab = Vocabulary::build(&streams, config.min_freq)?;
        let data = streams
            .iter()
            .zip(examples)
            .map(|(stream, (_, labels))| {
                let labels = labels
                    .iter()
                    .map(|l| {
                        label_index
                            .get(l.as_str())
                            .copied()
                            .ok_or_else(|| ClassifierError::UnknownLabel(l.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TrainExample {
                    ids: vocab.vectorize(stream, config.max_seq_len),
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let TrainOutcome {
            params,
            initial_loss,
            loss_history,
        } = train(&data, vocab.size(), label_space.len(), config)?;
        let report = FitReport {
            examples: data.len(),
            vocab_size: vocab.size(),
            initial_loss,
            loss_history,
        };
        let model = Self::new(config.clone(), stopwords, vocab, label_space, params, generation)?;
        Ok((model, report))
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn with_generation(mut self, generation: u64) -> Self {
        self.generation = generation;
        self
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_position(&self, label: &str) -> Option<usize> {
        self.label_index.get(label).copied()
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &CnnParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn stopwords(&self) -> &StopwordList {
        &self.stopwords
    }

    /// Sigmoid score for every label, in label-space order.
    pub fn score_all(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = preprocess(text, &self.stopwords);
        let ids = self.vocab.vectorize(&tokens, self.config.max_seq_len);
        Ok(forward(&self.params, &ids)?.scores)
    }

    /// Labels scoring at least `floor`, keyed by control id.
    pub fn predict(&self, text: &str, floor: f64) -> Result<BTreeMap<String, f64>> {
        Ok(self
            .score_all(text)?
            .into_iter()
            .zip(&self.labels)
            .filter(|(s, _)| *s >= floor)
            .map(|(s, l)| (l.clone(), s))
            .collect())
    }

    /// Versioned binary container: magic, version, JSON header, then the
    /// parameters as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SnapshotHeader {
            generation: self.generation,
            config: self.config.clone(),
            stopword_version: self.stopwords.version().to_owned(),
            vocabulary: self.vocab.tokens().to_vec(),
            labels: self.labels.clone(),
            shape: self.params.shape().clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.params.len() * 8);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.params.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ClassifierError::Snapshot(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(bad("not a model snapshot"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(bad(&format!("unsupported snapshot version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: SnapshotHeader =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let raw = &bytes[20 + header_len..];
        if raw.len() != header.shape.param_count() * 8 {
            return Err(bad("parameter block length does not match shape"));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let stopwords = StopwordList::by_version(&header.stopword_version)
            .ok_or_else(|| bad(&format!("unknown stopword list {}", header.stopword_version)))?;
        let params = CnnParams::from_flat(header.shape, data)?;
        Self::new(
            header.config,
            stopwords,
            Vocabulary::from_tokens(header.vocabulary),
            header.labels,
            params,
            header.generation,
        )
    }

    /// Writes the snapshot atomically (temp file, fsync, rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        if let Some(dir) = path.parent() {
            if let Ok(d) = fs::File::open(dir) {
                let _ = d.sync_all();
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Prediction through an optional model slot; an empty slot means no model
/// has been trained yet.
pub fn predict(model: Option<&CnnModel>, text: &str, floor: f64) -> Result<BTreeMap<String, f64>> {
    model.ok_or(ClassifierError::ModelNotTrained)?.predict(text, floor)
}

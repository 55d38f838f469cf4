//! Metrics, train/test splits, confidence-threshold sweeps, and the simulated
//! reviewer-feedback experiment.

pub mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active_learning::{ActiveLearner, FeedbackConfig, FeedbackError, FeedbackRecord, TrainingStore};
use crate::classifier::{ClassifierError, CnnModel, TrainConfig};
use crate::corpus::{ControlCatalog, StopwordList, TechspecCheck};
use crate::hybrid::{
    rank_and_filter, regulation_documents, score_labels, Backend, HybridError, MappingOptions,
    RegulationSnapshot, DEFAULT_MAX_HITS,
};
use crate::index::InvertedIndex;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset of {size} examples is too small for k={k}")]
    DatasetTooSmall { size: usize, k: usize },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("feedback pool of {pool} records does not split into iterations of size {y}")]
    PoolSizeMismatch { pool: usize, y: usize },
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// A specification text with its ground-truth control ids.
pub type LabeledText = (String, BTreeSet<String>);

/// Specification text and labels of each check.
pub fn labeled_texts(checks: &[TechspecCheck]) -> Vec<LabeledText> {
    checks.iter().map(|c| (c.specification_text(), c.labels.clone())).collect()
}

pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    /// Share of the data held out for testing. `None` holds out one of `k` folds.
    pub test_fraction: Option<f64>,
    pub thresholds: Vec<f64>,
    pub seed: u64,
    pub iterations: usize,
    pub macro_average: bool,
    pub max_hits: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 3,
            test_fraction: Some(0.15),
            thresholds: default_thresholds(),
            seed: 42,
            iterations: 5,
            macro_average: false,
            max_hits: DEFAULT_MAX_HITS,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.into()));
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if let Some(f) = self.test_fraction {
            if !(f > 0.0 && f < 1.0) {
                return bad("test_fraction must lie strictly between 0 and 1");
            }
        }
        if self.thresholds.is_empty() {
            return bad("at least one threshold is required");
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("thresholds must lie in [0, 1]");
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return bad("thresholds must be strictly increasing");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.max_hits == 0 {
            return bad("max_hits must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio_precision(hits: usize, predicted: usize, truth: usize) -> f64 {
    match (predicted, truth) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (p, _) => hits as f64 / p as f64,
    }
}

fn ratio_recall(hits: usize, truth: usize) -> f64 {
    if truth == 0 {
        1.0
    } else {
        hits as f64 / truth as f64
    }
}

/// Precision, recall and F1 of one predicted label set.
pub fn prf<S: Ord>(predicted: &BTreeSet<S>, truth: &BTreeSet<S>) -> (f64, f64, f64) {
    let hits = predicted.intersection(truth).count();
    let p = ratio_precision(hits, predicted.len(), truth.len());
    let r = ratio_recall(hits, truth.len());
    (p, r, f1_score(p, r))
}

/// Pooled counts over many examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub hits: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl Counts {
    pub fn add<S: Ord>(&mut self, predicted: &BTreeSet<S>, truth: &BTreeSet<S>) {
        self.hits += predicted.intersection(truth).count();
        self.predicted += predicted.len();
        self.truth += truth.len();
    }

    pub fn prf(&self) -> (f64, f64, f64) {
        let p = ratio_precision(self.hits, self.predicted, self.truth);
        let r = ratio_recall(self.hits, self.truth);
        (p, r, f1_score(p, r))
    }
}

/// Micro-averaged scores pool counts across examples; macro-averaged scores
/// average per-label scores over every label seen in truth or predictions.
pub fn aggregate_prf(predictions: &[BTreeSet<String>], truths: &[&BTreeSet<String>], macro_average: bool) -> (f64, f64, f64) {
    if !macro_average {
        let mut counts = Counts::default();
        for (p, t) in predictions.iter().zip(truths) {
            counts.add(p, t);
        }
        return counts.prf();
    }
    let mut per_label: BTreeMap<&str, (BTreeSet<usize>, BTreeSet<usize>)> = BTreeMap::new();
    for (i, (p, t)) in predictions.iter().zip(truths).enumerate() {
        for l in p {
            per_label.entry(l).or_default().0.insert(i);
        }
        for l in t.iter() {
            per_label.entry(l).or_default().1.insert(i);
        }
    }
    if per_label.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let n = per_label.len() as f64;
    let (sp, sr) = per_label.values().fold((0.0, 0.0), |(sp, sr), (p, t)| {
        let (lp, lr, _) = prf(p, t);
        (sp + lp, sr + lr)
    });
    let (p, r) = (sp / n, sr / n);
    (p, r, f1_score(p, r))
}

/// Seeded random split into (train, test). Both halves keep input order.
pub fn split_folds<T: Clone>(data: &[T], config: &EvalConfig) -> Result<(Vec<T>, Vec<T>)> {
    config.validate()?;
    let n = data.len();
    if n < config.k {
        return Err(EvalError::DatasetTooSmall { size: n, k: config.k });
    }
    let fraction = config.test_fraction.unwrap_or(1.0 / config.k as f64);
    let test_size = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut in_test = vec![false; n];
    for &i in &order[..test_size] {
        in_test[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n - test_size), Vec::with_capacity(test_size));
    for (item, t) in data.iter().zip(in_test) {
        if t {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, test))
}

/// Unthresholded scores for every example, computed once per backend.
pub fn score_eval_set(
    snapshot: &RegulationSnapshot,
    eval_set: &[LabeledText],
    backend: Backend,
    max_hits: usize,
) -> Result<Vec<BTreeMap<String, f64>>> {
    let options = MappingOptions::default();
    eval_set
        .iter()
        .map(|(text, _)| {
            let scores = score_labels(snapshot, text, backend, max_hits, &options)?;
            Ok(scores.into_iter().map(|(l, s)| (l, s.confidence)).collect())
        })
        .collect()
}

/// Metrics at each threshold for pre-computed scores.
pub fn sweep_scored(
    scored: &[BTreeMap<String, f64>],
    eval_set: &[LabeledText],
    thresholds: &[f64],
    macro_average: bool,
) -> Vec<MetricPoint> {
    let truths: Vec<&BTreeSet<String>> = eval_set.iter().map(|(_, t)| t).collect();
    thresholds
        .iter()
        .map(|&threshold| {
            let predictions: Vec<BTreeSet<String>> = scored
                .iter()
                .map(|s| s.iter().filter(|(_, &c)| c >= threshold).map(|(l, _)| l.clone()).collect())
                .collect();
            let (precision, recall, f1) = aggregate_prf(&predictions, &truths, macro_average);
            MetricPoint {
                threshold,
                precision,
                recall,
                f1,
                support: eval_set.len(),
            }
        })
        .collect()
}

/// One sweep of a ready snapshot over an evaluation set.
pub fn threshold_sweep(
    snapshot: &RegulationSnapshot,
    eval_set: &[LabeledText],
    backend: Backend,
    config: &EvalConfig,
) -> Result<Vec<MetricPoint>> {
    config.validate()?;
    let scored = score_eval_set(snapshot, eval_set, backend, config.max_hits)?;
    Ok(sweep_scored(&scored, eval_set, &config.thresholds, config.macro_average))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub backend: Backend,
    pub points: Vec<MetricPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: EvalConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub curves: Vec<SweepCurve>,
}

impl SweepReport {
    pub fn curve(&self, backend: Backend) -> Option<&SweepCurve> {
        self.curves.iter().find(|c| c.backend == backend)
    }

    /// Rows `threshold,backend,precision,recall,f1,support`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["threshold", "backend", "precision", "recall", "f1", "support"])?;
        for curve in &self.curves {
            for p in &curve.points {
                w.write_record([
                    p.threshold.to_string(),
                    curve.backend.to_string(),
                    p.precision.to_string(),
                    p.recall.to_string(),
                    p.f1.to_string(),
                    p.support.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn fit_model(
    examples: &[LabeledText],
    catalog: &ControlCatalog,
    stopwords: &StopwordList,
    train: &TrainConfig,
    generation: u64,
) -> Result<CnnModel, ClassifierError> {
    CnnModel::fit(examples, catalog.label_space(), stopwords.clone(), train, generation).map(|(m, _)| m)
}

/// Repeats split, train and sweep `config.iterations` times with successive
/// seeds and averages the points of each backend.
pub fn run_sweep(
    data: &[LabeledText],
    catalog: Arc<ControlCatalog>,
    stopwords: &StopwordList,
    backends: &[Backend],
    config: &EvalConfig,
    train: &TrainConfig,
) -> Result<SweepReport> {
    config.validate()?;
    let needs_model = backends.iter().any(|b| *b != Backend::Search);
    let mut sums: Vec<Vec<MetricPoint>> = Vec::new();
    let (mut train_size, mut test_size) = (0, 0);
    for it in 0..config.iterations as u64 {
        let split_config = EvalConfig {
            seed: config.seed.wrapping_add(it),
            ..config.clone()
        };
        let (train_set, test_set) = split_folds(data, &split_config)?;
        (train_size, test_size) = (train_set.len(), test_set.len());
        let model = if needs_model {
            let cfg = TrainConfig {
                seed: train.seed.wrapping_add(it),
                ..train.clone()
            };
            Some(Arc::new(fit_model(&train_set, &catalog, stopwords, &cfg, 1)?))
        } else {
            None
        };
        let snapshot = RegulationSnapshot::build(catalog.clone(), &train_set, model, stopwords.clone())?;
        for (b, backend) in backends.iter().enumerate() {
            let points = threshold_sweep(&snapshot, &test_set, *backend, config)?;
            if sums.len() <= b {
                sums.push(points);
            } else {
                for (acc, p) in sums[b].iter_mut().zip(points) {
                    acc.precision += p.precision;
                    acc.recall += p.recall;
                    acc.f1 += p.f1;
                }
            }
        }
    }
    let n = config.iterations as f64;
    let curves = backends
        .iter()
        .zip(sums)
        .map(|(backend, points)| SweepCurve {
            backend: *backend,
            points: points
                .into_iter()
                .map(|p| MetricPoint {
                    precision: p.precision / n,
                    recall: p.recall / n,
                    f1: p.f1 / n,
                    ..p
                })
                .collect(),
        })
        .collect();
    Ok(SweepReport {
        config: config.clone(),
        train_size,
        test_size,
        curves,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackExperimentConfig {
    pub y: usize,
    /// Confidence threshold for both simulated reviews and scoring.
    pub threshold: f64,
    pub max_hits: usize,
    pub train: TrainConfig,
}

impl Default for FeedbackExperimentConfig {
    fn default() -> Self {
        FeedbackExperimentConfig {
            y: 72,
            threshold: 0.5,
            max_hits: DEFAULT_MAX_HITS,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPoint {
    pub iteration: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub model_generation: u64,
    pub retrains: usize,
    pub feedback: usize,
}

fn hybrid_prf(snapshot: &RegulationSnapshot, eval_set: &[LabeledText], threshold: f64, max_hits: usize) -> Result<(f64, f64, f64)> {
    let scored = score_eval_set(snapshot, eval_set, Backend::Hybrid, max_hits)?;
    let point = &sweep_scored(&scored, eval_set, &[threshold], false)[0];
    Ok((point.precision, point.recall, point.f1))
}

/// Trains on `base_train`, then feeds the pool through the feedback pipeline
/// in chunks of `y`. A simulated reviewer accepts the true labels and rejects
/// every other proposed control. Iteration 0 is the score before any
/// feedback; each later point is measured after its chunk.
pub fn simulate_feedback_experiment(
    base_train: &[LabeledText],
    feedback_pool: &[LabeledText],
    eval_set: &[LabeledText],
    catalog: Arc<ControlCatalog>,
    stopwords: &StopwordList,
    config: &FeedbackExperimentConfig,
) -> Result<Vec<FeedbackPoint>> {
    let y = config.y;
    if y == 0 || feedback_pool.is_empty() || !feedback_pool.len().is_multiple_of(y) {
        return Err(EvalError::PoolSizeMismatch {
            pool: feedback_pool.len(),
            y,
        });
    }
    if !(0.0..=1.0).contains(&config.threshold) {
        return Err(HybridError::InvalidThreshold(config.threshold).into());
    }
    let trainer = |examples: &[LabeledText], generation: u64| {
        fit_model(examples, &catalog, stopwords, &config.train, generation)
    };
    let mut model = Arc::new(trainer(base_train, 1)?);
    let mut index = Arc::new(
        InvertedIndex::build(regulation_documents(&catalog, base_train, stopwords)).map_err(HybridError::from)?,
    );
    let mut learner = ActiveLearner::new(
        catalog.clone(),
        stopwords.clone(),
        FeedbackConfig { y },
        TrainingStore::from_examples(base_train, stopwords),
        model.generation(),
    )?;
    let snapshot = |index: &Arc<InvertedIndex>, model: &Arc<CnnModel>| RegulationSnapshot {
        catalog: catalog.clone(),
        index: index.clone(),
        model: Some(model.clone()),
        stopwords: stopwords.clone(),
    };
    let point = |iteration: usize, snap: &RegulationSnapshot, learner: &ActiveLearner| -> Result<FeedbackPoint> {
        let (precision, recall, f1) = hybrid_prf(snap, eval_set, config.threshold, config.max_hits)?;
        let state = learner.state();
        Ok(FeedbackPoint {
            iteration,
            precision,
            recall,
            f1,
            model_generation: snap.model_generation(),
            retrains: state.retrains,
            feedback: state.total_feedback,
        })
    };

    let mut points = vec![point(0, &snapshot(&index, &model), &learner)?];
    let epoch = Utc.timestamp_opt(0, 0).unwrap();
    for (iteration, chunk) in feedback_pool.chunks(y).enumerate() {
        for (i, (text, truth)) in chunk.iter().enumerate() {
            let proposed = {
                let snap = snapshot(&index, &model);
                let scores = score_labels(&snap, text, Backend::Hybrid, config.max_hits, &MappingOptions::default())?;
                rank_and_filter(&scores, config.threshold)
            };
            let rejected: BTreeSet<String> = proposed
                .into_iter()
                .map(|e| e.control_id)
                .filter(|c| !truth.contains(c))
                .collect();
            if truth.is_empty() && rejected.is_empty() {
                continue;
            }
            let record = FeedbackRecord {
                feedback_id: format!("sim-{}-{i}", iteration + 1),
                regulation_id: catalog.regulation_id().to_string(),
                check_text: text.clone(),
                accepted: truth.clone(),
                rejected,
                submitted_at: epoch,
                author: "simulated".into(),
            };
            learner.submit_feedback(&record, Arc::make_mut(&mut index), None)?;
            if let Some(m) = learner.maybe_retrain(trainer)? {
                model = Arc::new(m);
            }
        }
        points.push(point(iteration + 1, &snapshot(&index, &model), &learner)?);
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prf_examples() {
        assert_eq!(prf(&set(&["A", "B"]), &set(&["A", "C"])), (0.5, 0.5, 0.5));
        assert_eq!(prf(&set(&["A"]), &set(&["A"])), (1.0, 1.0, 1.0));
        assert_eq!(prf(&set(&[]), &set(&["A"])), (0.0, 0.0, 0.0));
        assert_eq!(prf(&set(&[]), &set(&[])), (1.0, 1.0, 1.0));
        assert_eq!(prf(&set(&["A"]), &set(&[])), (0.0, 1.0, 0.0));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let data: Vec<usize> = (0..100).collect();
        let config = EvalConfig::default();
        let (train, test) = split_folds(&data, &config).unwrap();
        assert_eq!((train.len(), test.len()), (85, 15));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort();
        assert_eq!(all, data);
        assert_eq!(split_folds(&data, &config).unwrap(), (train, test));

        let thirds = EvalConfig {
            test_fraction: None,
            ..EvalConfig::default()
        };
        assert_eq!(split_folds(&data, &thirds).unwrap().1.len(), 33);
    }

    #[test]
    fn split_rejects_tiny_dataset() {
        let err = split_folds(&[1, 2], &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, EvalError::DatasetTooSmall { size: 2, k: 3 }));
    }

    #[test]
    fn config_validation() {
        let bad = [
            EvalConfig { k: 1, ..EvalConfig::default() },
            EvalConfig { thresholds: vec![0.5, 0.5], ..EvalConfig::default() },
            EvalConfig { thresholds: vec![1.5], ..EvalConfig::default() },
            EvalConfig { test_fraction: Some(1.0), ..EvalConfig::default() },
            EvalConfig { iterations: 0, ..EvalConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(EvalError::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn perfect_scores_give_perfect_points() {
        let eval: Vec<LabeledText> = vec![("a".into(), set(&["A"])), ("b".into(), set(&["B", "C"]))];
        let scored: Vec<BTreeMap<String, f64>> = eval
            .iter()
            .map(|(_, t)| t.iter().map(|l| (l.clone(), 1.0)).collect())
            .collect();
        for macro_average in [false, true] {
            let points = sweep_scored(&scored, &eval, &[0.5], macro_average);
            let p = points[0];
            assert_eq!((p.precision, p.recall, p.f1, p.support), (1.0, 1.0, 1.0, 2));
        }
    }

    #[test]
    fn micro_and_macro_differ() {
        let preds = vec![set(&["A"]), set(&["A"]), set(&["B"])];
        let t1 = set(&["A"]);
        let t2 = set(&["B"]);
        let truths = vec![&t1, &t1, &t2];
        let micro = aggregate_prf(&preds, &truths, false);
        assert_eq!(micro, (1.0, 1.0, 1.0));
        let preds = vec![set(&["A"]), set(&["A"]), set(&["A"])];
        let (mp, mr, _) = aggregate_prf(&preds, &truths, false);
        assert!((mp - 2.0 / 3.0).abs() < 1e-12 && (mr - 2.0 / 3.0).abs() < 1e-12);
        let (p, r, _) = aggregate_prf(&preds, &truths, true);
        // A: precision 2/3, recall 1; B: precision 0 (nothing predicted), recall 0.
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let report = SweepReport {
            config: EvalConfig::default(),
            train_size: 1,
            test_size: 1,
            curves: vec![SweepCurve {
                backend: Backend::Search,
                points: vec![MetricPoint {
                    threshold: 0.5,
                    precision: 1.0,
                    recall: 0.5,
                    f1: 2.0 / 3.0,
                    support: 4,
                }],
            }],
        };
        let mut out = Vec::new();
        report.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("threshold,backend,precision,recall,f1,support"));
        assert!(lines.next().unwrap().starts_with("0.5,search,1,0.5,0.666"));
    }
}

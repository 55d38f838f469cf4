//! Python bindings: catalogs, a trainable hybrid mapper with feedback-driven
//! retraining, coverage, evaluation and fixture generation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use ctlmap::active_learning::{ActiveLearner, FeedbackConfig, FeedbackRecord, TrainingStore};
use ctlmap::analysis::{accepted_mappings, catalog_coverage};
use ctlmap::classifier::{CnnModel, TrainConfig};
use ctlmap::corpus::{
    load_control_catalog, load_techspec_dataset, parse_control_catalog, preprocess, ControlCatalog, DataFormat,
    DatasetOptions, StopwordList,
};
use ctlmap::evaluation::{labeled_texts, run_sweep, EvalConfig, LabeledText};
use ctlmap::fixtures::{self, FixtureConfig};
use ctlmap::hybrid::{
    map_check, rank_and_filter, score_labels, Backend, MappingOptions, MappingQuery, RegulationSnapshot,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

create_exception!(ctlmap_py, CtlmapError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    CtlmapError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, value: &Value) -> PyResult<Py<PyAny>> {
    Ok(match value {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any().unbind(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any().unbind(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, to_py(py, v)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn serialize(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(err)?)
}

fn format_of(path: &Path, format: Option<&str>) -> PyResult<DataFormat> {
    match format {
        Some(f) => f.parse().map_err(err),
        None => Ok(DataFormat::from_path(path)),
    }
}

/// CNN training hyperparameters.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (dim=None, widths=None, n_filters=None, max_seq_len=None, epochs=None, batch_size=None,
                        learning_rate=None, seed=None, min_freq=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        dim: Option<usize>,
        widths: Option<Vec<usize>>,
        n_filters: Option<usize>,
        max_seq_len: Option<usize>,
        epochs: Option<usize>,
        batch_size: Option<usize>,
        learning_rate: Option<f64>,
        seed: Option<u64>,
        min_freq: Option<usize>,
    ) -> PyResult<Self> {
        let d = TrainConfig::default();
        let inner = TrainConfig {
            dim: dim.unwrap_or(d.dim),
            widths: widths.unwrap_or(d.widths),
            n_filters: n_filters.unwrap_or(d.n_filters),
            max_seq_len: max_seq_len.unwrap_or(d.max_seq_len),
            epochs: epochs.unwrap_or(d.epochs),
            batch_size: batch_size.unwrap_or(d.batch_size),
            learning_rate: learning_rate.unwrap_or(d.learning_rate),
            seed: seed.unwrap_or(d.seed),
            min_freq: min_freq.unwrap_or(d.min_freq),
            init_scale: d.init_scale,
        };
        inner.validate().map_err(err)?;
        Ok(PyTrainConfig { inner })
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

/// The controls of one regulation.
#[pyclass(name = "Catalog", frozen)]
struct PyCatalog {
    inner: Arc<ControlCatalog>,
}

#[pymethods]
impl PyCatalog {
    /// Loads a JSONL or CSV catalog holding a single regulation.
    #[staticmethod]
    #[pyo3(signature = (path, format=None))]
    fn load(path: PathBuf, format: Option<&str>) -> PyResult<Self> {
        let controls = load_control_catalog(&path, format_of(&path, format)?).map_err(err)?;
        Ok(PyCatalog { inner: Arc::new(ControlCatalog::new(controls).map_err(err)?) })
    }

    /// Parses catalog JSONL held in a string.
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        let controls = parse_control_catalog(text.as_bytes(), DataFormat::Jsonl, &StopwordList::english()).map_err(err)?;
        Ok(PyCatalog { inner: Arc::new(ControlCatalog::new(controls).map_err(err)?) })
    }

    #[getter]
    fn regulation_id(&self) -> &str {
        self.inner.regulation_id()
    }

    fn control_ids(&self) -> Vec<String> {
        self.inner.label_space()
    }

    fn control(&self, py: Python<'_>, control_id: &str) -> PyResult<Py<PyAny>> {
        match self.inner.get(control_id) {
            Some(c) => serialize(py, c),
            None => Ok(py.None()),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Catalog({:?}, {} controls)", self.inner.regulation_id(), self.inner.len())
    }
}

fn load_examples(catalog: &ControlCatalog, path: &Path, format: Option<&str>) -> PyResult<Vec<LabeledText>> {
    let options = DatasetOptions { catalog: Some(catalog), strict: false };
    let loaded = load_techspec_dataset(path, format_of(path, format)?, options).map_err(err)?;
    Ok(labeled_texts(&loaded.checks))
}

/// Maps check text to the controls of one regulation with the search index,
/// the classifier, or both, and learns from reviewer verdicts.
#[pyclass(name = "Mapper")]
struct PyMapper {
    snapshot: RegulationSnapshot,
    learner: ActiveLearner,
    train: TrainConfig,
    records: Vec<FeedbackRecord>,
}

impl PyMapper {
    fn learner(catalog: &Arc<ControlCatalog>, examples: &[LabeledText], y: usize, generation: u64) -> PyResult<ActiveLearner> {
        let stopwords = StopwordList::english();
        let store = TrainingStore::from_examples(examples, &stopwords);
        ActiveLearner::new(catalog.clone(), stopwords, FeedbackConfig { y }, store, generation).map_err(err)
    }
}

#[pymethods]
impl PyMapper {
    /// `checks` is an optional labelled dataset (JSONL or CSV) that seeds both
    /// the index and the classifier's training data. `y` is the number of
    /// feedback records between retrains.
    #[new]
    #[pyo3(signature = (catalog, checks=None, train=None, y=50))]
    fn new(catalog: &PyCatalog, checks: Option<PathBuf>, train: Option<PyTrainConfig>, y: usize) -> PyResult<Self> {
        let catalog = catalog.inner.clone();
        let examples = match &checks {
            Some(path) => load_examples(&catalog, path, None)?,
            None => Vec::new(),
        };
        let snapshot = RegulationSnapshot::build(catalog.clone(), &examples, None, StopwordList::english()).map_err(err)?;
        Ok(PyMapper {
            learner: Self::learner(&catalog, &examples, y, 0)?,
            snapshot,
            train: train.map(|t| t.inner).unwrap_or_default(),
            records: Vec::new(),
        })
    }

    /// Fits the classifier on the seed data. Returns the fit report. Later
    /// models come from feedback retrains.
    fn fit(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        if !self.records.is_empty() {
            return Err(err("fit must run before any feedback is submitted"));
        }
        let examples = self.learner.store().examples().to_vec();
        let catalog = self.snapshot.catalog.clone();
        let train = self.train.clone();
        let generation = self.snapshot.model_generation() + 1;
        let (model, report) = py
            .detach(|| CnnModel::fit(&examples, catalog.label_space(), StopwordList::english(), &train, generation))
            .map_err(err)?;
        let y = self.learner.config().y;
        self.learner = Self::learner(&catalog, &examples, y, generation)?;
        self.snapshot.model = Some(Arc::new(model));
        serialize(py, &report)
    }

    /// Ranked controls with confidence at or above `threshold`.
    #[pyo3(signature = (text, threshold=0.5, max_hits=20, backend="hybrid"))]
    fn map(&self, py: Python<'_>, text: String, threshold: f64, max_hits: usize, backend: &str) -> PyResult<Py<PyAny>> {
        let backend: Backend = backend.parse().map_err(err)?;
        let query = MappingQuery {
            text,
            regulation_id: self.snapshot.regulation_id().to_string(),
            threshold,
            max_hits,
        };
        let mut result = map_check(&query, &self.snapshot).map_err(err)?;
        if backend != Backend::Hybrid {
            let scores = score_labels(&self.snapshot, &query.text, backend, max_hits, &MappingOptions::default())
                .map_err(err)?;
            result.results = rank_and_filter(&scores, threshold);
        }
        serialize(py, &result)
    }

    /// Records a reviewer verdict and retrains when `y` records have
    /// accumulated. Returns the learner state.
    #[pyo3(signature = (feedback_id, check_text, accepted=BTreeSet::new(), rejected=BTreeSet::new(), author=String::new()))]
    fn submit_feedback(
        &mut self,
        py: Python<'_>,
        feedback_id: String,
        check_text: String,
        accepted: BTreeSet<String>,
        rejected: BTreeSet<String>,
        author: String,
    ) -> PyResult<Py<PyAny>> {
        let record = FeedbackRecord {
            feedback_id,
            regulation_id: self.snapshot.regulation_id().to_string(),
            check_text,
            accepted,
            rejected,
            submitted_at: Utc::now(),
            author,
        };
        self.learner
            .submit_feedback(&record, Arc::make_mut(&mut self.snapshot.index), None)
            .map_err(err)?;
        self.records.push(record);
        let catalog = self.snapshot.catalog.clone();
        let train = self.train.clone();
        let learner = &mut self.learner;
        let retrained = py
            .detach(|| {
                learner.maybe_retrain(|examples, generation| {
                    CnnModel::fit(examples, catalog.label_space(), StopwordList::english(), &train, generation)
                        .map(|(m, _)| m)
                })
            })
            .map_err(err)?;
        if let Some(model) = retrained {
            self.snapshot.model = Some(Arc::new(model));
        }
        serialize(py, &self.learner.state())
    }

    #[getter]
    fn state(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, &self.learner.state())
    }

    #[getter]
    fn model_generation(&self) -> u64 {
        self.snapshot.model_generation()
    }

    /// Covered controls and gaps according to accepted feedback.
    fn coverage(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let report = catalog_coverage(&self.snapshot.catalog, &accepted_mappings(&self.records), Utc::now());
        serialize(py, &report)
    }

    fn save_model(&self, path: PathBuf) -> PyResult<()> {
        let model = self.snapshot.model.as_ref().ok_or_else(|| err("no model has been trained"))?;
        model.save(&path).map_err(err)
    }

    /// Installs a model saved by `save_model`. Its labels must match the catalog.
    fn load_model(&mut self, path: PathBuf) -> PyResult<()> {
        let model = CnnModel::load(&path).map_err(err)?;
        if model.labels() != self.snapshot.catalog.label_space().as_slice() {
            return Err(err("model labels do not match the catalog"));
        }
        self.snapshot.model = Some(Arc::new(model));
        Ok(())
    }
}

/// Lowercased, stopword-filtered tokens of `text`.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    preprocess(text, &StopwordList::english()).iter().map(str::to_string).collect()
}

/// Set precision, recall and F1 of `predicted` against `truth`.
#[pyfunction]
fn prf(predicted: BTreeSet<String>, truth: BTreeSet<String>) -> (f64, f64, f64) {
    ctlmap::evaluation::prf(&predicted, &truth)
}

/// Averaged precision/recall/F1 per backend and threshold over repeated
/// random train/test splits of `checks`.
#[pyfunction]
#[pyo3(signature = (catalog, checks, backends=vec!["search".to_string(), "cnn".to_string(), "hybrid".to_string()],
                    thresholds=None, test_fraction=0.15, iterations=1, seed=42, train=None))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    catalog: &PyCatalog,
    checks: PathBuf,
    backends: Vec<String>,
    thresholds: Option<Vec<f64>>,
    test_fraction: f64,
    iterations: usize,
    seed: u64,
    train: Option<PyTrainConfig>,
) -> PyResult<Py<PyAny>> {
    let catalog = catalog.inner.clone();
    let data = load_examples(&catalog, &checks, None)?;
    let backends = backends.iter().map(|b| b.parse::<Backend>().map_err(err)).collect::<PyResult<Vec<_>>>()?;
    let mut config = EvalConfig { test_fraction: Some(test_fraction), iterations, seed, ..EvalConfig::default() };
    if let Some(t) = thresholds {
        config.thresholds = t;
    }
    let train = train.map(|t| t.inner).unwrap_or_default();
    let report = py
        .detach(|| run_sweep(&data, catalog, &StopwordList::english(), &backends, &config, &train))
        .map_err(err)?;
    serialize(py, &report)
}

/// Writes the synthetic fixture corpus to `out_dir` and returns the file names.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=None))]
fn generate_fixtures(out_dir: PathBuf, seed: Option<u64>) -> PyResult<Vec<String>> {
    let mut config = FixtureConfig::default();
    if let Some(seed) = seed {
        config.seed = seed;
    }
    fixtures::generate(&config).write_dir(&out_dir).map_err(err)?;
    Ok(fixtures::FIXTURE_FILES.iter().map(|f| f.to_string()).collect())
}

#[pymodule]
fn ctlmap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CtlmapError", m.py().get_type::<CtlmapError>())?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyCatalog>()?;
    m.add_class::<PyMapper>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(prf, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_fixtures, m)?)?;
    Ok(())
}

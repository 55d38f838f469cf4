//! Mapping of techspec checks to regulation controls.
//!
//! The engine combines a BM25 inverted index with a multilabel CNN text
//! classifier, fuses their confidences, and keeps improving from reviewer
//! feedback. Coverage/gap reporting and an evaluation harness sit on top.

pub mod active_learning;
pub mod analysis;
pub mod classifier;
pub mod corpus;
pub mod evaluation;
pub mod fixtures;
pub mod hybrid;
pub mod index;

pub use active_learning::{ActiveLearner, FeedbackConfig, FeedbackLog, FeedbackRecord, LearnerState, TrainingStore};
pub use analysis::{coverage_report, CoverageReport};
pub use classifier::{CnnModel, TrainConfig};
pub use corpus::{preprocess, ControlCatalog, RegulationControl, StopwordList, TechspecCheck, TokenStream};
pub use evaluation::{prf, split_folds, threshold_sweep, EvalConfig, MetricPoint};
pub use hybrid::{map_check, Backend, MappingQuery, MappingResult, RegulationSnapshot};
pub use index::InvertedIndex;

//! Multilabel CNN text classifier: embedding, 1-D convolution with ReLU,
//! max-over-time pooling, and a sigmoid output layer, trained from scratch.

pub mod gradcheck;
pub mod model;
pub mod network;
pub mod train;
pub mod vocab;

use thiserror::Error;

pub use gradcheck::{compare_gradients, gradient_check, GradCheckReport};
pub use model::{predict, CnnModel, FitReport, DEFAULT_SCORE_FLOOR};
pub use network::{bce_loss, forward, CnnParams, CnnShape};
pub use train::{train, TrainConfig, TrainExample, TrainOutcome};
pub use vocab::{Vocabulary, PAD_ID, UNK_ID};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown label {0}")]
    UnknownLabel(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        detail: String,
    },
    #[error("no model has been trained")]
    ModelNotTrained,
    #[error("bad model snapshot: {0}")]
    Snapshot(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ClassifierError> = std::result::Result<T, E>;

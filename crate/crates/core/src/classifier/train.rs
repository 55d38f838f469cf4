use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{backward, bce_loss, forward, saturated_wrong, CnnParams, CnnShape};
use super::{ClassifierError, Result};

/// Hyperparameters; every field must be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub widths: Vec<usize>,
    pub n_filters: usize,
    pub max_seq_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub min_freq: usize,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            widths: vec![2, 3, 4],
            n_filters: 32,
            max_seq_len: 128,
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 42,
            min_freq: 2,
            init_scale: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dim > 0
            && !self.widths.is_empty()
            && self.widths.iter().all(|&w| w > 0)
            && self.n_filters > 0
            && self.max_seq_len > 0
            && self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.min_freq > 0
            && self.init_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ClassifierError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// One vectorized example with its positive label indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub ids: Vec<u32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CnnParams,
    /// Mean loss over the data before the first update.
    pub initial_loss: f64,
    /// Mean training loss of each epoch, measured during the epoch.
    pub loss_history: Vec<f64>,
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            if g == 0.0 && self.m[i] == 0.0 && self.v[i] == 0.0 {
                continue;
            }
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

fn truth_mask(labels: &[usize], n_labels: usize) -> Vec<bool> {
    let mut mask = vec![false; n_labels];
    for &l in labels {
        mask[l] = true;
    }
    mask
}

/// Mini-batch training with Adam on per-label binary cross-entropy.
/// Deterministic for a fixed `config.seed`.
pub fn train(
    data: &[TrainExample],
    vocab_size: usize,
    n_labels: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(ClassifierError::EmptyTrainingSet);
    }
    for ex in data {
        if let Some(&bad) = ex.labels.iter().find(|&&l| l >= n_labels) {
            return Err(ClassifierError::UnknownLabel(format!("label index {bad}")));
        }
    }
    let shape = CnnShape {
        vocab_size,
        dim: config.dim,
        widths: config.widths.clone(),
        n_filters: config.n_filters,
        n_labels,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = CnnParams::init_uniform(shape, config.init_scale, &mut rng)?;
    let truths: Vec<Vec<bool>> = data.iter().map(|e| truth_mask(&e.labels, n_labels)).collect();

    let mut initial_loss = 0.0;
    for (ex, truth) in data.iter().zip(&truths) {
        initial_loss += bce_loss(&forward(&params, &ex.ids)?.scores, truth);
    }
    initial_loss /= data.len() as f64;

    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &data[i];
                let cache = forward(&params, &ex.ids)?;
                let loss = bce_loss(&cache.scores, &truths[i]);
                if !loss.is_finite() || saturated_wrong(&cache.scores, &truths[i]) {
                    return Err(ClassifierError::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                        loss,
                        detail: "output saturated on the wrong side of a label; \
                                 reduce the learning rate"
                            .into(),
                    });
                }
                epoch_loss += loss;
                backward(&params, &ex.ids, &truths[i], &cache, scale, &mut grad);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(ClassifierError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    loss: f64::NAN,
                    detail: "non-finite gradient".into(),
                });
            }
            adam.step(params.as_mut_slice(), &grad);
            if !params.is_finite() {
                return Err(ClassifierError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    loss: f64::NAN,
                    detail: "non-finite parameters after update".into(),
                });
            }
        }
        loss_history.push(epoch_loss / data.len() as f64);
    }

    Ok(TrainOutcome {
        params,
        initial_loss,
        loss_history,
    })
}

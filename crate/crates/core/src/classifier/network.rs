//! Parameter layout, forward pass, loss, and backpropagation.
//!
//! All parameters live in one flat vector:
//! `[embeddings V×d | per width: filters n_f×w×d, bias n_f | output L×F | output bias L]`
//! with `F = |widths| · n_f`. Padding is masked: pad ids read as zero vectors,
//! and convolution windows start only at real tokens, so trailing padding never
//! changes a score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::PAD_ID;
use super::{ClassifierError, Result};

pub const LOSS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnShape {
    pub vocab_size: usize,
    pub dim: usize,
    pub widths: Vec<usize>,
    pub n_filters: usize,
    pub n_labels: usize,
}

impl CnnShape {
    pub fn n_features(&self) -> usize {
        self.widths.len() * self.n_filters
    }

    fn embeddings_len(&self) -> usize {
        self.vocab_size * self.dim
    }

    /// Offset of bank `b`'s filters; its bias follows the filters.
    fn bank_offset(&self, bank: usize) -> usize {
        self.embeddings_len()
            + self.widths[..bank]
                .iter()
                .map(|w| self.n_filters * (w * self.dim + 1))
                .sum::<usize>()
    }

    fn output_offset(&self) -> usize {
        self.bank_offset(self.widths.len())
    }

    pub fn param_count(&self) -> usize {
        self.output_offset() + self.n_labels * self.n_features() + self.n_labels
    }

    fn validate(&self) -> Result<()> {
        let ok = self.vocab_size >= 2
            && self.dim > 0
            && !self.widths.is_empty()
            && self.widths.iter().all(|&w| w > 0)
            && self.n_filters > 0
            && self.n_labels > 0;
        if ok {
            Ok(())
        } else {
            Err(ClassifierError::ShapeMismatch(format!("invalid shape {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    shape: CnnShape,
    data: Vec<f64>,
}

impl CnnParams {
    pub fn zeros(shape: CnnShape) -> Result<Self> {
        shape.validate()?;
        let data = vec![0.0; shape.param_count()];
        Ok(CnnParams { shape, data })
    }

    /// Uniform(−scale, scale) embeddings, filters and output weights; zero
    /// biases and a zero padding row.
    pub fn init_uniform<R: Rng>(shape: CnnShape, scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let s = p.shape.clone();
        for (i, v) in p.data[..s.embeddings_len()].iter_mut().enumerate() {
            let row = i / s.dim;
            let x = rng.gen_range(-scale..scale);
            *v = if row == PAD_ID as usize { 0.0 } else { x };
        }
        for bank in 0..s.widths.len() {
            let start = s.bank_offset(bank);
            let n = s.n_filters * s.widths[bank] * s.dim;
            for v in &mut p.data[start..start + n] {
                *v = rng.gen_range(-scale..scale);
            }
        }
        let out = s.output_offset();
        for v in &mut p.data[out..out + s.n_labels * s.n_features()] {
            *v = rng.gen_range(-scale..scale);
        }
        Ok(p)
    }

    /// Builds parameters from nested arrays: `filters[bank][f][k][j]`,
    /// `conv_bias[bank][f]`, `out_weights[label][feature]`.
    pub fn from_parts(
        embeddings: &[Vec<f64>],
        filters: &[Vec<Vec<Vec<f64>>>],
        conv_bias: &[Vec<f64>],
        out_weights: &[Vec<f64>],
        out_bias: &[f64],
    ) -> Result<Self> {
        let mismatch = |what: &str| ClassifierError::ShapeMismatch(what.to_owned());
        let dim = embeddings.first().map(Vec::len).ok_or_else(|| mismatch("no embeddings"))?;
        let n_filters = filters.first().map(Vec::len).ok_or_else(|| mismatch("no filters"))?;
        let widths: Vec<usize> = filters
            .iter()
            .map(|bank| bank.first().map(Vec::len).unwrap_or(0))
            .collect();
        let shape = CnnShape {
            vocab_size: embeddings.len(),
            dim,
            widths,
            n_filters,
            n_labels: out_bias.len(),
        };
        let mut p = Self::zeros(shape)?;
        let s = p.shape.clone();
        let mut data = Vec::with_capacity(s.param_count());
        for row in embeddings {
            if row.len() != dim {
                return Err(mismatch("embedding row length"));
            }
            data.extend_from_slice(row);
        }
        if conv_bias.len() != filters.len() {
            return Err(mismatch("conv bias bank count"));
        }
        for (bank, bias) in filters.iter().zip(conv_bias) {
            if bank.len() != n_filters || bias.len() != n_filters {
                return Err(mismatch("filter count"));
            }
            for f in bank {
                for row in f {
                    if row.len() != dim || f.len() != bank[0].len() {
                        return Err(mismatch("filter row"));
                    }
                    data.extend_from_slice(row);
                }
            }
            data.extend_from_slice(bias);
        }
        if out_weights.len() != s.n_labels {
            return Err(mismatch("output rows"));
        }
        for row in out_weights {
            if row.len() != s.n_features() {
                return Err(mismatch("output row length"));
            }
            data.extend_from_slice(row);
        }
        data.extend_from_slice(out_bias);
        debug_assert_eq!(data.len(), s.param_count());
        p.data = data;
        Ok(p)
    }

    pub fn from_flat(shape: CnnShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.param_count() {
            return Err(ClassifierError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                data.len()
            )));
        }
        Ok(CnnParams { shape, data })
    }

    pub fn shape(&self) -> &CnnShape {
        &self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn embedding(&self, id: u32) -> &[f64] {
        let d = self.shape.dim;
        &self.data[id as usize * d..(id as usize + 1) * d]
    }

    fn filters(&self, bank: usize) -> &[f64] {
        let start = self.shape.bank_offset(bank);
        &self.data[start..start + self.shape.n_filters * self.shape.widths[bank] * self.shape.dim]
    }

    fn conv_bias(&self, bank: usize) -> &[f64] {
        let start = self.shape.bank_offset(bank)
            + self.shape.n_filters * self.shape.widths[bank] * self.shape.dim;
        &self.data[start..start + self.shape.n_filters]
    }

    fn out_weights(&self) -> &[f64] {
        let start = self.shape.output_offset();
        &self.data[start..start + self.shape.n_labels * self.shape.n_features()]
    }

    fn out_bias(&self) -> &[f64] {
        let start = self.shape.output_offset() + self.shape.n_labels * self.shape.n_features();
        &self.data[start..]
    }

    /// Returns a copy with output rows reordered: row `i` of the result is row
    /// `perm[i]` of `self`.
    pub fn permute_labels(&self, perm: &[usize]) -> Result<Self> {
        let s = &self.shape;
        if perm.len() != s.n_labels {
            return Err(ClassifierError::ShapeMismatch("permutation length".into()));
        }
        let mut out = self.clone();
        let f = s.n_features();
        let w_off = s.output_offset();
        let b_off = w_off + s.n_labels * f;
        for (i, &src) in perm.iter().enumerate() {
            out.data[w_off + i * f..w_off + (i + 1) * f]
                .copy_from_slice(&self.data[w_off + src * f..w_off + (src + 1) * f]);
            out.data[b_off + i] = self.data[b_off + src];
        }
        Ok(out)
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    real_len: usize,
    /// Embedded tokens, `real_len × d`, zero rows for padding.
    inputs: Vec<f64>,
    /// Per pooled feature: winning window start and its pre-activation.
    argmax: Vec<usize>,
    pre_activation: Vec<f64>,
    pub pooled: Vec<f64>,
    pub scores: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn real_len(ids: &[u32]) -> usize {
    ids.iter().rposition(|&t| t != PAD_ID).map_or(0, |p| p + 1)
}

/// Runs the network on one id sequence.
pub fn forward(params: &CnnParams, ids: &[u32]) -> Result<ForwardCache> {
    let s = &params.shape;
    let d = s.dim;
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= s.vocab_size) {
        return Err(ClassifierError::ShapeMismatch(format!(
            "token id {bad} outside vocabulary of {}",
            s.vocab_size
        )));
    }
    let n = real_len(ids);
    let mut inputs = vec![0.0; n * d];
    for (q, &id) in ids[..n].iter().enumerate() {
        if id != PAD_ID {
            inputs[q * d..(q + 1) * d].copy_from_slice(params.embedding(id));
        }
    }

    let nf = s.n_features();
    let mut argmax = Vec::with_capacity(nf);
    let mut pre_activation = Vec::with_capacity(nf);
    let mut pooled = Vec::with_capacity(nf);
    for (bank, &w) in s.widths.iter().enumerate() {
        let filters = params.filters(bank);
        let bias = params.conv_bias(bank);
        for f in 0..s.n_filters {
            let filter = &filters[f * w * d..(f + 1) * w * d];
            let mut best = f64::NEG_INFINITY;
            let mut best_p = 0;
            for p in 0..n.max(1) {
                let m = w.min(n.saturating_sub(p));
                let c = bias[f] + dot(&filter[..m * d], &inputs[p * d..(p + m) * d]);
                if c > best {
                    best = c;
                    best_p = p;
                }
            }
            argmax.push(best_p);
            pre_activation.push(best);
            pooled.push(best.max(0.0));
        }
    }

    let out_w = params.out_weights();
    let scores = params
        .out_bias()
        .iter()
        .enumerate()
        .map(|(l, b)| sigmoid(b + dot(&out_w[l * nf..(l + 1) * nf], &pooled)))
        .collect();

    Ok(ForwardCache {
        real_len: n,
        inputs,
        argmax,
        pre_activation,
        pooled,
        scores,
    })
}

/// Mean per-label binary cross-entropy with an ε guard inside the logs.
pub fn bce_loss(scores: &[f64], truth: &[bool]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(truth)
        .map(|(&s, &y)| {
            if y {
                -(s + LOSS_EPS).ln()
            } else {
                -(1.0 - s + LOSS_EPS).ln()
            }
        })
        .sum();
    total / scores.len() as f64
}

/// True when some label is numerically saturated on the wrong side, i.e. the
/// unguarded cross-entropy would be infinite.
pub fn saturated_wrong(scores: &[f64], truth: &[bool]) -> bool {
    scores
        .iter()
        .zip(truth)
        .any(|(&s, &y)| (y && s <= 0.0) || (!y && s >= 1.0))
}

/// Accumulates `scale · ∂loss/∂θ` for one example into `grad` (same layout as
/// the parameters).
pub fn backward(
    params: &CnnParams,
    ids: &[u32],
    truth: &[bool],
    cache: &ForwardCache,
    scale: f64,
    grad: &mut [f64],
) {
    let s = &params.shape;
    let d = s.dim;
    let nf = s.n_features();
    let n_labels = s.n_labels as f64;

    // d loss / d logit, differentiating the guarded loss exactly.
    let dz: Vec<f64> = cache
        .scores
        .iter()
        .zip(truth)
        .map(|(&p, &y)| {
            let dp = if y {
                -1.0 / (p + LOSS_EPS)
            } else {
                1.0 / (1.0 - p + LOSS_EPS)
            };
            scale * dp * p * (1.0 - p) / n_labels
        })
        .collect();

    let w_off = s.output_offset();
    let b_off = w_off + s.n_labels * nf;
    let out_w = params.out_weights();
    let mut dh = vec![0.0; nf];
    for (l, &g) in dz.iter().enumerate() {
        grad[b_off + l] += g;
        let row = &out_w[l * nf..(l + 1) * nf];
        let grow = &mut grad[w_off + l * nf..w_off + (l + 1) * nf];
        for j in 0..nf {
            grow[j] += g * cache.pooled[j];
            dh[j] += row[j] * g;
        }
    }

    let n = cache.real_len;
    let mut feature = 0;
    for (bank, &w) in s.widths.iter().enumerate() {
        let f_off = s.bank_offset(bank);
        let bias_off = f_off + s.n_filters * w * d;
        let filters = params.filters(bank);
        for f in 0..s.n_filters {
            let j = feature;
            feature += 1;
            if cache.pre_activation[j] <= 0.0 || dh[j] == 0.0 {
                continue;
            }
            let dc = dh[j];
            grad[bias_off + f] += dc;
            let p = cache.argmax[j];
            let m = w.min(n.saturating_sub(p));
            let filter = &filters[f * w * d..(f + 1) * w * d];
            let gf = f_off + f * w * d;
            for k in 0..m {
                let q = p + k;
                let x = &cache.inputs[q * d..(q + 1) * d];
                for jj in 0..d {
                    grad[gf + k * d + jj] += dc * x[jj];
                }
                let id = ids[q];
                if id != PAD_ID {
                    let e_off = id as usize * d;
                    for jj in 0..d {
                        grad[e_off + jj] += dc * filter[k * d + jj];
                    }
                }
            }
        }
    }
}

/// Loss and full gradient for a single example.
pub fn loss_and_gradient(params: &CnnParams, ids: &[u32], truth: &[bool]) -> Result<(f64, Vec<f64>)> {
    let cache = forward(params, ids)?;
    let loss = bce_loss(&cache.scores, truth);
    let mut grad = vec![0.0; params.len()];
    backward(params, ids, truth, &cache, 1.0, &mut grad);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> CnnShape {
        CnnShape {
            vocab_size: 6,
            dim: 4,
            widths: vec![2, 3],
            n_filters: 2,
            n_labels: 3,
        }
    }

    #[test]
    fn zero_params_give_one_half() {
        let p = CnnParams::zeros(shape()).unwrap();
        let c = forward(&p, &[2, 3, 4, 1]).unwrap();
        assert!(c.scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn loss_values() {
        assert!((bce_loss(&[0.5, 0.5, 0.5], &[true, false, true]) - 2f64.ln()).abs() < 1e-11);
        assert!(bce_loss(&[1.0, 0.0], &[true, false]) < 1e-11);
        let want = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((bce_loss(&[0.9, 0.2], &[true, false]) - want).abs() < 1e-11);
        assert!((want - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn pad_only_input_uses_conv_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = CnnParams::init_uniform(shape(), 0.5, &mut rng).unwrap();
        let s = p.shape().clone();
        for bank in 0..s.widths.len() {
            let off = s.bank_offset(bank) + s.n_filters * s.widths[bank] * s.dim;
            p.data[off] = 0.3;
            p.data[off + 1] = -0.2;
        }
        let c = forward(&p, &[1, 1, 1]).unwrap();
        assert_eq!(c.pooled, [0.3, 0.0, 0.3, 0.0]);
        let out_w = p.out_weights();
        for l in 0..s.n_labels {
            let z = p.out_bias()[l] + dot(&out_w[l * 4..(l + 1) * 4], &c.pooled);
            assert_eq!(c.scores[l], sigmoid(z));
        }
    }

    #[test]
    fn out_of_vocab_id_is_shape_mismatch() {
        let p = CnnParams::zeros(shape()).unwrap();
        assert!(matches!(forward(&p, &[9]), Err(ClassifierError::ShapeMismatch(_))));
    }

    #[test]
    fn trailing_padding_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = CnnParams::init_uniform(shape(), 0.5, &mut rng).unwrap();
        let a = forward(&p, &[2, 5, 3]).unwrap().scores;
        for extra in 1..6 {
            let mut ids = vec![2, 5, 3];
            ids.extend(std::iter::repeat_n(PAD_ID, extra));
            assert_eq!(forward(&p, &ids).unwrap().scores, a);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}

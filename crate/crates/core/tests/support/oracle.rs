//! Independent reference implementations used to check the engine.
//!
//! Nothing here calls into the code under test; each function recomputes its
//! quantity the slow, obvious way from raw inputs.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

/// A document as raw tokens plus labels.
#[derive(Debug, Clone)]
pub struct RefDoc {
    pub id: String,
    pub tokens: Vec<String>,
    pub labels: BTreeSet<String>,
}

/// BM25 by scanning every document for every query term.
pub fn brute_force_bm25(docs: &[RefDoc], query: &[String], target: usize) -> f64 {
    let n = docs.len() as f64;
    let total: usize = docs.iter().map(|d| d.tokens.len()).sum();
    let avg = total as f64 / n;
    let doc = &docs[target];
    let len = doc.tokens.len() as f64;
    let mut score = 0.0;
    for term in query {
        let tf = doc.tokens.iter().filter(|t| *t == term).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let df = docs.iter().filter(|d| d.tokens.contains(term)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        score += idf * tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * len / avg));
    }
    score
}

/// Label ranking: max document score per label, confidence = score / best,
/// sorted by score descending then label ascending.
pub fn brute_force_search(docs: &[RefDoc], query: &[String]) -> Vec<(String, f64, f64)> {
    let mut per_label: BTreeMap<String, f64> = BTreeMap::new();
    for i in 0..docs.len() {
        let s = brute_force_bm25(docs, query, i);
        if s <= 0.0 {
            continue;
        }
        for label in &docs[i].labels {
            let e = per_label.entry(label.clone()).or_insert(0.0);
            if s > *e {
                *e = s;
            }
        }
    }
    let best = per_label.values().cloned().fold(0.0, f64::max);
    let mut hits: Vec<_> = per_label
        .into_iter()
        .map(|(l, s)| (l, s, s / best))
        .collect();
    hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    hits
}

/// Plain nested-vector CNN weights for the reference forward pass.
#[derive(Debug, Clone)]
pub struct RefCnn {
    /// vocab × d
    pub embeddings: Vec<Vec<f64>>,
    /// per width: filter × offset × d
    pub filters: Vec<Vec<Vec<Vec<f64>>>>,
    /// per width: filter
    pub conv_bias: Vec<Vec<f64>>,
    /// labels × features
    pub out_weights: Vec<Vec<f64>>,
    pub out_bias: Vec<f64>,
}

pub const PAD: u32 = 1;

/// Embedding, masked convolution + ReLU, max-over-time, affine, sigmoid,
/// all with explicit loops. Padding contributes zero vectors; windows start
/// only at real tokens (or once, at 0, for an all-padding input).
pub fn reference_forward(net: &RefCnn, ids: &[u32]) -> Vec<f64> {
    let d = net.embeddings[0].len();
    let n = ids.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
    let token = |q: usize, j: usize| -> f64 {
        if q < n && ids[q] != PAD {
            net.embeddings[ids[q] as usize][j]
        } else {
            0.0
        }
    };
    let mut features = Vec::new();
    for (bank, filters) in net.filters.iter().enumerate() {
        for (f, filter) in filters.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for p in 0..n.max(1) {
                let mut c = net.conv_bias[bank][f];
                for (k, row) in filter.iter().enumerate() {
                    for j in 0..d {
                        c += row[j] * token(p + k, j);
                    }
                }
                let c = c.max(0.0);
                if c > best {
                    best = c;
                }
            }
            features.push(best);
        }
    }
    net.out_weights
        .iter()
        .zip(&net.out_bias)
        .map(|(row, b)| {
            let mut z = *b;
            for (w, h) in row.iter().zip(&features) {
                z += w * h;
            }
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// Mean per-label binary cross-entropy with the 1e-12 guard.
pub fn reference_loss(scores: &[f64], truth: &[bool]) -> f64 {
    let eps = 1e-12;
    let total: f64 = scores
        .iter()
        .zip(truth)
        .map(|(&s, &y)| if y { -(s + eps).ln() } else { -(1.0 - s + eps).ln() })
        .sum();
    total / scores.len() as f64
}

/// Uniform random weights in [-0.5, 0.5) with a zero padding embedding.
pub fn random_net(seed: u64, vocab: usize, d: usize, widths: &[usize], nf: usize, labels: usize) -> RefCnn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = || rng.gen_range(-0.5..0.5);
    let mut embeddings: Vec<Vec<f64>> = (0..vocab).map(|_| (0..d).map(|_| u()).collect()).collect();
    embeddings[PAD as usize] = vec![0.0; d];
    let filters = widths
        .iter()
        .map(|&w| (0..nf).map(|_| (0..w).map(|_| (0..d).map(|_| u()).collect()).collect()).collect())
        .collect();
    let conv_bias = widths.iter().map(|_| (0..nf).map(|_| u() * 0.2).collect()).collect();
    let features = widths.len() * nf;
    let out_weights = (0..labels).map(|_| (0..features).map(|_| u()).collect()).collect();
    let out_bias = (0..labels).map(|_| u() * 0.2).collect();
    RefCnn { embeddings, filters, conv_bias, out_weights, out_bias }
}

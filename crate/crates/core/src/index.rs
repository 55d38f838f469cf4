//! Embedded inverted index with BM25 relevance and per-query confidence.
//!
//! Relevance is unbounded BM25 (k1 = 1.2, b = 0.75). Hits are aggregated per
//! control label by the best supporting document, and confidence is the
//! label's relevance divided by the best relevance of the query.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenStream;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

const FORMAT_MAGIC: &str = "ctlmap-index";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("cannot build an index from zero documents")]
    EmptyCorpus,
    #[error("index holds no documents")]
    EmptyIndex,
    #[error("unknown document id `{0}`")]
    UnknownDocId(String),
    #[error("document `{0}` has an empty label set")]
    EmptyLabelSet(String),
    #[error("max_hits must be at least 1")]
    ZeroMaxHits,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed index file: {0}")]
    Format(String),
}

pub type Result<T, E = IndexError> = std::result::Result<T, E>;

/// A document to be indexed: its tokens, the controls it evidences, and an id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexedDocument {
    pub doc_id: String,
    pub label_set: BTreeSet<String>,
    pub token_counts: BTreeMap<String, u32>,
    pub length: u32,
}

impl IndexedDocument {
    pub fn new(doc_id: impl Into<String>, tokens: &TokenStream, labels: BTreeSet<String>) -> Self {
        let mut token_counts = BTreeMap::new();
        for t in tokens.iter() {
            *token_counts.entry(t.to_owned()).or_insert(0) += 1;
        }
        IndexedDocument {
            doc_id: doc_id.into(),
            label_set: labels,
            token_counts,
            length: tokens.len() as u32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DocEntry {
    doc_id: String,
    labels: BTreeSet<String>,
    length: u32,
}

/// Label-level search result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub label: String,
    pub relevance: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<Posting>>,
    docs: Vec<DocEntry>,
    doc_lookup: HashMap<String, u32>,
    total_length: u64,
    generation: u64,
}

impl InvertedIndex {
    /// Builds an index from a batch; generation starts at 1.
    pub fn build(docs: impl IntoIterator<Item = IndexedDocument>) -> Result<Self> {
        let mut index = InvertedIndex {
            postings: HashMap::new(),
            docs: Vec::new(),
            doc_lookup: HashMap::new(),
            total_length: 0,
            generation: 0,
        };
        for doc in docs {
            index.insert(doc)?;
        }
        if index.docs.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        index.generation = 1;
        Ok(index)
    }

    /// Adds one document as its own mutation batch.
    pub fn add_document(&mut self, doc: IndexedDocument) -> Result<()> {
        self.insert(doc)?;
        self.generation += 1;
        Ok(())
    }

    /// Adds several documents as one mutation batch (one generation bump).
    pub fn add_documents(&mut self, docs: impl IntoIterator<Item = IndexedDocument>) -> Result<()> {
        let mut staged = self.clone();
        let mut added = false;
        for doc in docs {
            staged.insert(doc)?;
            added = true;
        }
        if added {
            staged.generation += 1;
            *self = staged;
        }
        Ok(())
    }

    fn insert(&mut self, doc: IndexedDocument) -> Result<()> {
        if doc.label_set.is_empty() {
            return Err(IndexError::EmptyLabelSet(doc.doc_id));
        }
        if self.doc_lookup.contains_key(&doc.doc_id) {
            return Err(IndexError::DuplicateDocId(doc.doc_id));
        }
        let internal = self.docs.len() as u32;
        for (token, tf) in doc.token_counts {
            self.postings
                .entry(token)
                .or_default()
                .push(Posting { doc: internal, tf });
        }
        self.total_length += u64::from(doc.length);
        self.doc_lookup.insert(doc.doc_id.clone(), internal);
        self.docs.push(DocEntry {
            doc_id: doc.doc_id,
            labels: doc.label_set,
            length: doc.length,
        });
        Ok(())
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.docs.len() as f64
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Overrides the generation counter, e.g. when a rebuilt index replaces an
    /// older one and numbering must stay monotone.
    pub fn set_generation(&mut self, generation: u64) {
        self.generation = generation;
    }

    pub fn contains_doc(&self, doc_id: &str) -> bool {
        self.doc_lookup.contains_key(doc_id)
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.doc_lookup
            .get(doc_id)
            .map(|&i| self.docs[i as usize].length)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, length: u32, avg: f64) -> f64 {
        let tf = f64::from(tf);
        let len = f64::from(length);
        idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * len / avg))
    }

    /// BM25 relevance of one document for a query. Every query token
    /// contributes, so repeated query tokens count repeatedly.
    pub fn bm25_score(&self, query: &TokenStream, doc_id: &str) -> Result<f64> {
        let &doc = self
            .doc_lookup
            .get(doc_id)
            .ok_or_else(|| IndexError::UnknownDocId(doc_id.to_owned()))?;
        let avg = self.avg_doc_len();
        let length = self.docs[doc as usize].length;
        let mut score = 0.0;
        for term in query.iter() {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            // postings are in insertion order, so internal ids are sorted
            if let Ok(pos) = list.binary_search_by_key(&doc, |p| p.doc) {
                score += self.term_weight(self.idf(list.len()), list[pos].tf, length, avg);
            }
        }
        Ok(score)
    }

    /// Per-document relevance for every document sharing a term with the query.
    pub fn score_documents(&self, query: &TokenStream) -> Vec<(u32, f64)> {
        let avg = self.avg_doc_len();
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in query.iter() {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                let w = self.term_weight(idf, p.tf, self.docs[p.doc as usize].length, avg);
                *scores.entry(p.doc).or_insert(0.0) += w;
            }
        }
        let mut out: Vec<_> = scores.into_iter().collect();
        out.sort_unstable_by_key(|&(d, _)| d);
        out
    }

    /// Ranked control labels for a query, at most `max_hits` of them.
    pub fn search(&self, query: &TokenStream, max_hits: usize) -> Result<Vec<SearchHit>> {
        if max_hits == 0 {
            return Err(IndexError::ZeroMaxHits);
        }
        if self.docs.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let mut per_label: HashMap<&str, f64> = HashMap::new();
        for (doc, score) in self.score_documents(query) {
            if score <= 0.0 {
                continue;
            }
            for label in &self.docs[doc as usize].labels {
                let best = per_label.entry(label.as_str()).or_insert(0.0);
                if score > *best {
                    *best = score;
                }
            }
        }
        let mut hits: Vec<(&str, f64)> = per_label.into_iter().collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        hits.truncate(max_hits);
        let max = hits.first().map(|h| h.1).unwrap_or(0.0);
        Ok(hits
            .into_iter()
            .map(|(label, relevance)| SearchHit {
                label: label.to_owned(),
                relevance,
                confidence: relevance / max,
            })
            .collect())
    }

    /// The documents in insertion order, reconstructed from the postings.
    pub fn documents(&self) -> Vec<IndexedDocument> {
        let mut counts: Vec<BTreeMap<String, u32>> = vec![BTreeMap::new(); self.docs.len()];
        for (token, list) in &self.postings {
            for p in list {
                counts[p.doc as usize].insert(token.clone(), p.tf);
            }
        }
        self.docs
            .iter()
            .zip(counts)
            .map(|(d, token_counts)| IndexedDocument {
                doc_id: d.doc_id.clone(),
                label_set: d.labels.clone(),
                token_counts,
                length: d.length,
            })
            .collect()
    }

    /// Writes a header line followed by one JSON document per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = IndexHeader {
            format: FORMAT_MAGIC.to_owned(),
            version: FORMAT_VERSION,
            generation: self.generation,
            doc_count: self.docs.len(),
            avg_doc_len: self.avg_doc_len(),
        };
        serde_json::to_writer(&mut w, &header).map_err(io::Error::other)?;
        w.write_all(b"\n")?;
        for doc in self.documents() {
            serde_json::to_writer(&mut w, &doc).map_err(io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| IndexError::Format("missing header".into()))??;
        let header: IndexHeader = serde_json::from_str(&header_line)
            .map_err(|e| IndexError::Format(format!("header: {e}")))?;
        if header.format != FORMAT_MAGIC || header.version != FORMAT_VERSION {
            return Err(IndexError::Format(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut docs = Vec::with_capacity(header.doc_count);
        for line in lines {
            let line = line?;
            docs.push(
                serde_json::from_str::<IndexedDocument>(&line)
                    .map_err(|e| IndexError::Format(e.to_string()))?,
            );
        }
        if docs.len() != header.doc_count {
            return Err(IndexError::Format(format!(
                "header declares {} documents, found {}",
                header.doc_count,
                docs.len()
            )));
        }
        let mut index = Self::build(docs)?;
        index.generation = header.generation;
        Ok(index)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    generation: u64,
    doc_count: usize,
    avg_doc_len: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(tokens: &[&str]) -> TokenStream {
        TokenStream {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            origin_len: tokens.len(),
        }
    }

    fn doc(id: &str, tokens: &[&str], labels: &[&str]) -> IndexedDocument {
        IndexedDocument::new(
            id,
            &stream(tokens),
            labels.iter().map(|s| s.to_string()).collect(),
        )
    }

    fn three_docs() -> InvertedIndex {
        InvertedIndex::build([
            doc("d1", &["a", "b"], &["A"]),
            doc("d2", &["a", "c", "d", "e"], &["B"]),
            doc("d3", &["f", "g", "h", "i", "j", "k"], &["C"]),
        ])
        .unwrap()
    }

    #[test]
    fn build_stats() {
        let idx = three_docs();
        assert_eq!(idx.doc_count(), 3);
        assert_eq!(idx.avg_doc_len(), 4.0);
        assert_eq!(idx.generation(), 1);
    }

    #[test]
    fn build_errors() {
        let err = InvertedIndex::build([doc("x", &["a"], &["A"]), doc("x", &["b"], &["B"])])
            .unwrap_err();
        assert!(matches!(err, IndexError::DuplicateDocId(_)));
        assert!(matches!(
            InvertedIndex::build(Vec::new()).unwrap_err(),
            IndexError::EmptyCorpus
        ));
        assert!(matches!(
            InvertedIndex::build([doc("x", &["a"], &[])]).unwrap_err(),
            IndexError::EmptyLabelSet(_)
        ));
    }

    #[test]
    fn add_document_updates_and_is_searchable() {
        let mut idx = three_docs();
        idx.add_document(doc("d4", &["zebra"], &["Z"])).unwrap();
        assert_eq!(idx.doc_count(), 4);
        assert_eq!(idx.generation(), 2);
        let hits = idx.search(&stream(&["zebra"]), 10).unwrap();
        assert_eq!(hits[0].label, "Z");
        assert!(matches!(
            idx.add_document(doc("d4", &["q"], &["Q"])).unwrap_err(),
            IndexError::DuplicateDocId(_)
        ));
        assert_eq!(idx.generation(), 2);
    }

    #[test]
    fn bm25_single_doc_value() {
        let idx = InvertedIndex::build([doc("d", &["encrypt"], &["SC-28"])]).unwrap();
        let s = idx.bm25_score(&stream(&["encrypt"]), "d").unwrap();
        assert!((s - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((s - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn bm25_no_overlap_and_unknown_doc() {
        let idx = three_docs();
        assert_eq!(idx.bm25_score(&stream(&["zzz"]), "d1").unwrap(), 0.0);
        assert!(matches!(
            idx.bm25_score(&stream(&["a"]), "nope").unwrap_err(),
            IndexError::UnknownDocId(_)
        ));
    }

    #[test]
    fn search_normalizes_and_orders() {
        let idx = three_docs();
        assert!(idx.search(&stream(&[]), 5).unwrap().is_empty());
        let hits = idx.search(&stream(&["a", "b"]), 5).unwrap();
        assert_eq!(hits[0].label, "A");
        assert_eq!(hits[0].confidence, 1.0);
        assert!(hits.windows(2).all(|w| w[0].relevance >= w[1].relevance));
        assert!(matches!(idx.search(&stream(&["a"]), 0), Err(IndexError::ZeroMaxHits)));
    }

    #[test]
    fn search_truncates_and_breaks_ties_by_label() {
        let idx = InvertedIndex::build([
            doc("1", &["x"], &["B"]),
            doc("2", &["x"], &["A"]),
            doc("3", &["x"], &["C"]),
        ])
        .unwrap();
        let hits = idx.search(&stream(&["x"]), 2).unwrap();
        let labels: Vec<_> = hits.iter().map(|h| h.label.as_str()).collect();
        assert_eq!(labels, ["A", "B"]);
        assert!(hits.iter().all(|h| h.confidence == 1.0));
    }

    #[test]
    fn label_aggregation_takes_max() {
        let idx = InvertedIndex::build([
            doc("1", &["x", "y"], &["A"]),
            doc("2", &["x"], &["A", "B"]),
            doc("3", &["z"], &["C"]),
        ])
        .unwrap();
        let q = stream(&["x", "y"]);
        let hits = idx.search(&q, 10).unwrap();
        let best = idx.bm25_score(&q, "1").unwrap();
        assert_eq!(hits[0].label, "A");
        assert_eq!(hits[0].relevance, best);
        assert_eq!(hits[1].relevance, idx.bm25_score(&q, "2").unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let mut idx = three_docs();
        idx.add_document(doc("d4", &["a", "a", "z"], &["A", "Z"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.jsonl");
        idx.save(&path).unwrap();
        let loaded = InvertedIndex::load(&path).unwrap();
        assert_eq!(loaded, idx);
    }

    #[test]
    fn add_documents_is_one_batch_and_atomic() {
        let mut idx = three_docs();
        idx.add_documents([doc("d4", &["q"], &["Q"]), doc("d5", &["r"], &["R"])])
            .unwrap();
        assert_eq!(idx.generation(), 2);
        let before = idx.clone();
        let err = idx.add_documents([doc("d6", &["s"], &["S"]), doc("d1", &["t"], &["T"])]);
        assert!(err.is_err());
        assert_eq!(idx, before);
    }
}

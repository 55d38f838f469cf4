mod support;

use std::collections::BTreeSet;

use ctlmap::corpus::TokenStream;
use ctlmap::index::{IndexedDocument, InvertedIndex};
use proptest::prelude::*;
use support::oracle::{brute_force_bm25, brute_force_search, RefDoc};

fn stream(tokens: &[String]) -> TokenStream {
    TokenStream {
        tokens: tokens.to_vec(),
        origin_len: tokens.len(),
    }
}

fn to_indexed(d: &RefDoc) -> IndexedDocument {
    IndexedDocument::new(d.id.clone(), &stream(&d.tokens), d.labels.clone())
}

fn corpus_strategy() -> impl Strategy<Value = Vec<RefDoc>> {
    let word = prop::sample::select(
        (0..30).map(|i| format!("w{i}")).collect::<Vec<_>>(),
    );
    let label = prop::sample::select(
        (0..12).map(|i| format!("L-{i}")).collect::<Vec<_>>(),
    );
    let doc = (
        prop::collection::vec(word, 0..15),
        prop::collection::btree_set(label, 1..3),
    );
    prop::collection::vec(doc, 1..100).prop_map(|docs| {
        docs.into_iter()
            .enumerate()
            .map(|(i, (tokens, labels))| RefDoc {
                id: format!("doc{i}"),
                tokens,
                labels,
            })
            .collect()
    })
}

fn query_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select((0..34).map(|i| format!("w{i}")).collect::<Vec<_>>()),
        0..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn search_matches_brute_force(docs in corpus_strategy(), queries in prop::collection::vec(query_strategy(), 20)) {
        let index = InvertedIndex::build(docs.iter().map(to_indexed)).unwrap();
        for q in &queries {
            for (i, d) in docs.iter().enumerate() {
                let got = index.bm25_score(&stream(q), &d.id).unwrap();
                let want = brute_force_bm25(&docs, q, i);
                prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
            let hits = index.search(&stream(q), usize::MAX).unwrap();
            let want = brute_force_search(&docs, q);
            prop_assert_eq!(hits.len(), want.len());
            for (h, (label, rel, conf)) in hits.iter().zip(&want) {
                prop_assert_eq!(&h.label, label);
                prop_assert!((h.relevance - rel).abs() < 1e-9);
                prop_assert!((h.confidence - conf).abs() < 1e-9);
            }
            if let Some(first) = hits.first() {
                prop_assert_eq!(first.confidence, 1.0);
                prop_assert!(hits.iter().all(|h| (0.0..=1.0).contains(&h.confidence)));
            }
        }
    }

    #[test]
    fn incremental_add_matches_batch_build(docs in corpus_strategy(), queries in prop::collection::vec(query_strategy(), 5)) {
        prop_assume!(docs.len() >= 2);
        let (last, rest) = docs.split_last().unwrap();
        let batch = InvertedIndex::build(docs.iter().map(to_indexed)).unwrap();
        let mut incremental = InvertedIndex::build(rest.iter().map(to_indexed)).unwrap();
        incremental.add_document(to_indexed(last)).unwrap();
        prop_assert_eq!(incremental.generation(), 2);
        for q in &queries {
            for d in &docs {
                prop_assert_eq!(
                    batch.bm25_score(&stream(q), &d.id).unwrap(),
                    incremental.bm25_score(&stream(q), &d.id).unwrap()
                );
            }
            prop_assert_eq!(
                batch.search(&stream(q), 50).unwrap(),
                incremental.search(&stream(q), 50).unwrap()
            );
        }
    }
}

#[test]
fn five_doc_corpus_disk_encryption_query() {
    let raw = [
        ("d1", "data disks encrypted rest", &["SC-28", "SC-13"][..]),
        ("d2", "password uppercase letter complexity", &["IA-5(1)"][..]),
        ("d3", "user administrators least privilege", &["AC-6"][..]),
        ("d4", "disk partition mount options", &["CM-6"][..]),
        ("d5", "audit encrypted transport channel", &["SC-8"][..]),
    ];
    let docs: Vec<RefDoc> = raw
        .iter()
        .map(|(id, text, labels)| RefDoc {
            id: id.to_string(),
            tokens: text.split(' ').map(str::to_owned).collect(),
            labels: labels.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
        })
        .collect();
    let index = InvertedIndex::build(docs.iter().map(to_indexed)).unwrap();
    let q = vec!["disk".to_string(), "encrypted".to_string()];
    let hits = index.search(&stream(&q), 10).unwrap();
    let want = brute_force_search(&docs, &q);
    let got: Vec<_> = hits.iter().map(|h| h.label.clone()).collect();
    let expected: Vec<_> = want.iter().map(|w| w.0.clone()).collect();
    assert_eq!(got, expected);
    assert_eq!(got.len(), 4);
}

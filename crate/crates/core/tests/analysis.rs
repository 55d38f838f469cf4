use std::collections::BTreeSet;

use chrono::{TimeZone, Utc};
use ctlmap::analysis::catalog_coverage;
use ctlmap::corpus::{ControlCatalog, RegulationControl};
use proptest::prelude::*;

fn catalog(n: usize) -> ControlCatalog {
    let controls = (0..n)
        .map(|i| RegulationControl {
            regulation_id: "R".into(),
            control_id: format!("{}-{i}", ["AC", "SC", "IA"][i % 3]),
            family: ["AC", "SC", "IA"][i % 3].into(),
            title: String::new(),
            text: format!("control text {i}"),
        })
        .collect();
    ControlCatalog::new(controls).unwrap()
}

fn mappings() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec(
        (0usize..40, 0usize..30).prop_map(|(check, c)| (format!("chk{check}"), format!("{}-{c}", ["AC", "SC", "IA"][c % 3]))),
        0..40,
    )
}

proptest! {
    #[test]
    fn covered_and_gaps_partition_the_catalog(n in 1usize..25, accepted in mappings()) {
        let cat = catalog(n);
        let r = catalog_coverage(&cat, &accepted, Utc.timestamp_opt(0, 0).unwrap());
        let all: BTreeSet<String> = cat.label_space().into_iter().collect();
        prop_assert!(r.covered.is_disjoint(&r.gaps));
        prop_assert_eq!(r.covered.union(&r.gaps).cloned().collect::<BTreeSet<_>>(), all);
        prop_assert_eq!(r.coverage_ratio, r.covered.len() as f64 / n as f64);
        let family_total: usize = r.per_family.values().map(|f| f.total).sum();
        let family_covered: usize = r.per_family.values().map(|f| f.covered).sum();
        prop_assert_eq!(family_total, n);
        prop_assert_eq!(family_covered, r.covered.len());
    }

    #[test]
    fn adding_a_mapping_never_shrinks_coverage(n in 1usize..25, accepted in mappings(), extra in mappings()) {
        let cat = catalog(n);
        let at = Utc.timestamp_opt(0, 0).unwrap();
        let before = catalog_coverage(&cat, &accepted, at);
        let mut more = accepted.clone();
        more.extend(extra);
        let after = catalog_coverage(&cat, &more, at);
        prop_assert!(before.covered.is_subset(&after.covered));
        prop_assert!(after.gaps.len() <= before.gaps.len());
    }
}

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ctlmap::classifier::{CnnModel, TrainConfig};
use ctlmap::corpus::{load_control_catalog, load_techspec_dataset, ControlCatalog, DataFormat, DatasetOptions, StopwordList};
use ctlmap::evaluation::labeled_texts;
use ctlmap::fixtures::{self, FixtureConfig, DISK_ENCRYPTION_CHECK, FIXTURE_FILES};

fn bundled() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures"))
}

#[test]
fn bundled_fixtures_match_generator() {
    let dir = tempfile::TempDir::new().unwrap();
    fixtures::generate(&FixtureConfig::default()).write_dir(dir.path()).unwrap();
    for name in FIXTURE_FILES {
        let fresh = fs::read(dir.path().join(name)).unwrap();
        let shipped = fs::read(bundled().join(name)).unwrap();
        assert!(fresh == shipped, "{name} is stale; regenerate with `ctlmap generate-fixtures --out fixtures`");
    }
}

#[test]
fn bundled_fixtures_load_strictly() {
    for (catalog_file, checks) in [
        ("nist_controls.jsonl", &["checks.jsonl", "feedback_pool.jsonl", "feedback_eval.jsonl"][..]),
        ("hipaa_controls.jsonl", &["hipaa_checks.jsonl"][..]),
    ] {
        let catalog = ControlCatalog::new(load_control_catalog(&bundled().join(catalog_file), DataFormat::Jsonl).unwrap())
            .unwrap();
        for name in checks {
            let opts = DatasetOptions { catalog: Some(&catalog), strict: true };
            let loaded = load_techspec_dataset(&bundled().join(name), DataFormat::Jsonl, opts).unwrap();
            assert!(!loaded.checks.is_empty(), "{name}");
        }
    }
}

#[derive(serde::Deserialize)]
struct Profile {
    train: TrainConfig,
}

/// The classifier alone ranks both disk-encryption controls in its top three
/// once trained on the bundled corpus with the shipped profile.
#[test]
fn disk_encryption_check_ranks_sc28_and_sc13_top_three() {
    let profile: Profile = toml::from_str(&fs::read_to_string(bundled().join("ctlmap.toml")).unwrap()).unwrap();
    let catalog = Arc::new(
        ControlCatalog::new(load_control_catalog(&bundled().join("nist_controls.jsonl"), DataFormat::Jsonl).unwrap())
            .unwrap(),
    );
    let checks = load_techspec_dataset(&bundled().join("checks.jsonl"), DataFormat::Jsonl, DatasetOptions::default())
        .unwrap()
        .checks;
    let (model, _) =
        CnnModel::fit(&labeled_texts(&checks), catalog.label_space(), StopwordList::english(), &profile.train, 1).unwrap();
    let mut ranked: Vec<(String, f64)> = model.predict(DISK_ENCRYPTION_CHECK, 0.0).unwrap().into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let top: Vec<&str> = ranked.iter().take(3).map(|(id, _)| id.as_str()).collect();
    assert!(top.contains(&"SC-28") && top.contains(&"SC-13"), "top three {top:?}");
}

//! Coverage and gap reporting over reviewer-accepted mappings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active_learning::FeedbackRecord;
use crate::corpus::ControlCatalog;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown regulation `{0}`")]
    UnknownRegulation(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyCoverage {
    pub covered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub regulation_id: String,
    pub covered: BTreeSet<String>,
    pub gaps: BTreeSet<String>,
    pub coverage_ratio: f64,
    pub per_family: BTreeMap<String, FamilyCoverage>,
    pub generated_at: DateTime<Utc>,
}

impl CoverageReport {
    /// Rows `family,covered,total,ratio`.
    pub fn write_family_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["family", "covered", "total", "ratio"])?;
        for (family, f) in &self.per_family {
            let ratio = if f.total == 0 { 0.0 } else { f.covered as f64 / f.total as f64 };
            w.write_record([family.clone(), f.covered.to_string(), f.total.to_string(), ratio.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A control counts as covered once any accepted `(check_id, control_id)`
/// mapping names it. Mappings to controls outside the catalog are ignored.
pub fn coverage_report(
    catalogs: &BTreeMap<String, ControlCatalog>,
    regulation_id: &str,
    accepted: &[(String, String)],
    generated_at: DateTime<Utc>,
) -> Result<CoverageReport> {
    let catalog = catalogs
        .get(regulation_id)
        .ok_or_else(|| AnalysisError::UnknownRegulation(regulation_id.to_string()))?;
    Ok(catalog_coverage(catalog, accepted, generated_at))
}

pub fn catalog_coverage(
    catalog: &ControlCatalog,
    accepted: &[(String, String)],
    generated_at: DateTime<Utc>,
) -> CoverageReport {
    let mapped: BTreeSet<&str> = accepted.iter().map(|(_, c)| c.as_str()).collect();
    let mut covered = BTreeSet::new();
    let mut gaps = BTreeSet::new();
    let mut per_family: BTreeMap<String, FamilyCoverage> = BTreeMap::new();
    for control in catalog.controls() {
        let family = per_family.entry(control.family.clone()).or_default();
        family.total += 1;
        if mapped.contains(control.control_id.as_str()) {
            family.covered += 1;
            covered.insert(control.control_id.clone());
        } else {
            gaps.insert(control.control_id.clone());
        }
    }
    let total = catalog.len();
    CoverageReport {
        regulation_id: catalog.regulation_id().to_string(),
        coverage_ratio: if total == 0 { 0.0 } else { covered.len() as f64 / total as f64 },
        covered,
        gaps,
        per_family,
        generated_at,
    }
}

/// Accepted `(feedback_id, control_id)` pairs from a feedback history. A later
/// record on the same check text that rejects a control withdraws an earlier
/// acceptance of it.
pub fn accepted_mappings(records: &[FeedbackRecord]) -> Vec<(String, String)> {
    let mut latest: HashMap<(&str, &str), Option<&str>> = HashMap::new();
    let mut order: Vec<(&str, &str)> = Vec::new();
    for r in records {
        let text = r.check_text.trim();
        for c in &r.accepted {
            let key = (text, c.as_str());
            if latest.insert(key, Some(r.feedback_id.as_str())).is_none() {
                order.push(key);
            }
        }
        for c in &r.rejected {
            if let Some(v) = latest.get_mut(&(text, c.as_str())) {
                *v = None;
            }
        }
    }
    order
        .into_iter()
        .filter_map(|key| latest[&key].map(|id| (id.to_string(), key.1.to_string())))
        .collect()
}

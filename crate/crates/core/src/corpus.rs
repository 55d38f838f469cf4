//! Data model, catalog/dataset ingestion, and text preprocessing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: duplicate control id `{control_id}` in regulation `{regulation_id}`")]
    DuplicateControlId {
        line: usize,
        regulation_id: String,
        control_id: String,
    },
    #[error("line {line}: control `{control_id}` has no text left after preprocessing")]
    EmptyControlText { line: usize, control_id: String },
    #[error("line {line}: check `{check_id}` is invalid: {reason}")]
    InvalidCheck {
        line: usize,
        check_id: String,
        reason: String,
    },
    #[error("line {line}: check `{check_id}` references unknown control `{label}`")]
    UnknownLabel {
        line: usize,
        check_id: String,
        label: String,
    },
    #[error("catalog mixes regulations `{expected}` and `{found}`")]
    MixedRegulations { expected: String, found: String },
    #[error("catalog is empty")]
    EmptyCatalog,
}

impl CorpusError {
    /// 1-based line of the offending record, when known.
    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::Parse { line, .. }
            | CorpusError::MissingField { line, .. }
            | CorpusError::DuplicateControlId { line, .. }
            | CorpusError::EmptyControlText { line, .. }
            | CorpusError::InvalidCheck { line, .. }
            | CorpusError::UnknownLabel { line, .. } => Some(*line),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CorpusError::Io(_) => "Io",
            CorpusError::Parse { .. } => "Parse",
            CorpusError::MissingField { .. } => "MissingField",
            CorpusError::DuplicateControlId { .. } => "DuplicateControlId",
            CorpusError::EmptyControlText { .. } => "EmptyControlText",
            CorpusError::InvalidCheck { .. } => "InvalidCheck",
            CorpusError::UnknownLabel { .. } => "UnknownLabel",
            CorpusError::MixedRegulations { .. } => "MixedRegulations",
            CorpusError::EmptyCatalog => "EmptyCatalog",
        }
    }
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Input file dialect for catalogs and datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Guesses the format from a file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(DataFormat::Jsonl),
            "csv" => Ok(DataFormat::Csv),
            other => Err(format!("unknown data format `{other}` (expected jsonl or csv)")),
        }
    }
}

/// One control of a target regulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegulationControl {
    pub regulation_id: String,
    pub control_id: String,
    pub family: String,
    pub title: String,
    pub text: String,
}

impl RegulationControl {
    /// Text that represents the control in the search index.
    pub fn indexed_text(&self) -> String {
        join_nonempty([self.control_id.as_str(), &self.title, &self.text])
    }
}

/// One techspec check, optionally labelled with the controls it maps to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TechspecCheck {
    pub check_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub fix: String,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub labels: BTreeSet<String>,
}

impl TechspecCheck {
    pub fn specification_text(&self) -> String {
        build_specification_text(self)
    }
}

/// Concatenates title, description, rationale and fix with single spaces,
/// skipping empty fields.
pub fn build_specification_text(check: &TechspecCheck) -> String {
    join_nonempty([
        check.title.as_str(),
        &check.description,
        &check.rationale,
        &check.fix,
    ])
}

fn join_nonempty<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    parts
        .into_iter()
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Versioned stopword set. The version travels with every model snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordList {
    words: BTreeSet<String>,
    version: String,
}

pub const ENGLISH_STOPWORDS_VERSION: &str = "en-1";

const ENGLISH_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any",
    "are", "as", "at", "be", "because", "been", "before", "being", "below", "between", "both",
    "but", "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "either",
    "few", "for", "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers",
    "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "may", "me", "might", "must", "my", "myself", "nor", "of", "off", "on",
    "once", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "shall",
    "she", "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "thus", "to",
    "too", "under", "until", "up", "upon", "very", "via", "was", "we", "were", "what", "when",
    "where", "whether", "which", "while", "who", "whom", "whose", "why", "will", "with", "would",
    "yet", "you", "your", "yours", "yourself", "yourselves",
];

impl StopwordList {
    /// Builds a list; entries are lowercased.
    pub fn new<I, S>(words: I, version: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        StopwordList {
            words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
            version: version.into(),
        }
    }

    /// The bundled English list.
    pub fn english() -> Self {
        Self::new(ENGLISH_STOPWORDS.iter().copied(), ENGLISH_STOPWORDS_VERSION)
    }

    /// Resolves a bundled list by version string.
    pub fn by_version(version: &str) -> Option<Self> {
        (version == ENGLISH_STOPWORDS_VERSION).then(Self::english)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Default for StopwordList {
    fn default() -> Self {
        Self::english()
    }
}

/// Preprocessed tokens of one text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<String>,
    /// Token count before stopword filtering.
    pub origin_len: usize,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    /// Space-joined rendering; feeding it back through `preprocess` is a no-op.
    pub fn render(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Lowercases, splits on every non-alphanumeric character, and drops stopwords.
pub fn preprocess(text: &str, stopwords: &StopwordList) -> TokenStream {
    let lowered = text.to_lowercase();
    let mut origin_len = 0;
    let tokens = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .inspect(|_| origin_len += 1)
        .filter(|t| !stopwords.contains(t))
        .map(str::to_owned)
        .collect();
    TokenStream { tokens, origin_len }
}

/// The controls of one regulation, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlCatalog {
    regulation_id: String,
    controls: Vec<RegulationControl>,
    by_id: HashMap<String, usize>,
}

impl ControlCatalog {
    pub fn new(controls: Vec<RegulationControl>) -> Result<Self> {
        let regulation_id = controls
            .first()
            .map(|c| c.regulation_id.clone())
            .ok_or(CorpusError::EmptyCatalog)?;
        let mut by_id = HashMap::with_capacity(controls.len());
        for (i, control) in controls.iter().enumerate() {
            if control.regulation_id != regulation_id {
                return Err(CorpusError::MixedRegulations {
                    expected: regulation_id,
                    found: control.regulation_id.clone(),
                });
            }
            if by_id.insert(control.control_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateControlId {
                    line: i + 1,
                    regulation_id,
                    control_id: control.control_id.clone(),
                });
            }
        }
        Ok(ControlCatalog {
            regulation_id,
            controls,
            by_id,
        })
    }

    /// Splits a multi-regulation control list into one catalog per regulation.
    pub fn group(controls: Vec<RegulationControl>) -> Result<BTreeMap<String, ControlCatalog>> {
        let mut grouped: BTreeMap<String, Vec<RegulationControl>> = BTreeMap::new();
        for control in controls {
            grouped
                .entry(control.regulation_id.clone())
                .or_default()
                .push(control);
        }
        grouped
            .into_iter()
            .map(|(id, controls)| Ok((id, ControlCatalog::new(controls)?)))
            .collect()
    }

    pub fn regulation_id(&self) -> &str {
        &self.regulation_id
    }

    pub fn controls(&self) -> &[RegulationControl] {
        &self.controls
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn get(&self, control_id: &str) -> Option<&RegulationControl> {
        self.by_id.get(control_id).map(|&i| &self.controls[i])
    }

    pub fn contains(&self, control_id: &str) -> bool {
        self.by_id.contains_key(control_id)
    }

    pub fn position(&self, control_id: &str) -> Option<usize> {
        self.by_id.get(control_id).copied()
    }

    /// Control ids in catalog order; this is the classifier's label space.
    pub fn label_space(&self) -> Vec<String> {
        self.controls.iter().map(|c| c.control_id.clone()).collect()
    }
}

#[derive(Debug, Default, Deserialize)]
struct RawControl {
    regulation_id: Option<String>,
    control_id: Option<String>,
    family: Option<String>,
    title: Option<String>,
    text: Option<String>,
}

fn required(value: Option<String>, line: usize, field: &'static str) -> Result<String> {
    match value {
        Some(v) if !v.trim().is_empty() => Ok(v.trim().to_owned()),
        _ => Err(CorpusError::MissingField { line, field }),
    }
}

fn derive_family(control_id: &str) -> String {
    control_id
        .split(|c: char| !c.is_ascii_alphabetic())
        .next()
        .unwrap_or_default()
        .to_owned()
}

impl RawControl {
    fn validate(self, line: usize, stopwords: &StopwordList) -> Result<RegulationControl> {
        let regulation_id = required(self.regulation_id, line, "regulation_id")?;
        let control_id = required(self.control_id, line, "control_id")?;
        let text = required(self.text, line, "text")?;
        if preprocess(&text, stopwords).is_empty() {
            return Err(CorpusError::EmptyControlText { line, control_id });
        }
        let family = match self.family {
            Some(f) if !f.trim().is_empty() => f.trim().to_owned(),
            _ => derive_family(&control_id),
        };
        Ok(RegulationControl {
            regulation_id,
            control_id,
            family,
            title: self.title.unwrap_or_default().trim().to_owned(),
            text,
        })
    }
}

#[derive(Debug, Default, Deserialize)]
struct RawCheck {
    check_id: Option<String>,
    title: Option<String>,
    description: Option<String>,
    rationale: Option<String>,
    fix: Option<String>,
    source: Option<String>,
    #[serde(default)]
    labels: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
struct RawCsvCheck {
    check_id: Option<String>,
    title: Option<String>,
    description: Option<String>,
    rationale: Option<String>,
    fix: Option<String>,
    source: Option<String>,
    labels: Option<String>,
}

impl From<RawCsvCheck> for RawCheck {
    fn from(r: RawCsvCheck) -> Self {
        RawCheck {
            check_id: r.check_id,
            title: r.title,
            description: r.description,
            rationale: r.rationale,
            fix: r.fix,
            source: r.source,
            labels: r
                .labels
                .unwrap_or_default()
                .split(';')
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect(),
        }
    }
}

impl RawCheck {
    fn validate(self, line: usize) -> Result<TechspecCheck> {
        let check_id = required(self.check_id, line, "check_id")?;
        let check = TechspecCheck {
            check_id,
            title: self.title.unwrap_or_default(),
            description: self.description.unwrap_or_default(),
            rationale: self.rationale.unwrap_or_default(),
            fix: self.fix.unwrap_or_default(),
            source: self.source.unwrap_or_default(),
            labels: self.labels.into_iter().map(|l| l.trim().to_owned()).collect(),
        };
        if check.title.trim().is_empty() && check.description.trim().is_empty() {
            return Err(CorpusError::InvalidCheck {
                line,
                check_id: check.check_id,
                reason: "title and description are both empty".into(),
            });
        }
        Ok(check)
    }
}

/// Reads (line number, raw record) pairs from JSONL or CSV.
fn read_records<J, C, R>(reader: R, format: DataFormat) -> Result<Vec<(usize, J)>>
where
    J: for<'de> Deserialize<'de> + From<C>,
    C: for<'de> Deserialize<'de>,
    R: Read,
{
    let mut out = Vec::new();
    match format {
        DataFormat::Jsonl => {
            for (i, line) in BufReader::new(reader).lines().enumerate() {
                let line_no = i + 1;
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: J = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                out.push((line_no, record));
            }
        }
        DataFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(false)
                .from_reader(reader);
            let headers = rdr
                .headers()
                .map_err(|e| CorpusError::Parse {
                    line: 1,
                    message: e.to_string(),
                })?
                .clone();
            for result in rdr.records() {
                let parse_err = |e: csv::Error| CorpusError::Parse {
                    line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                    message: e.to_string(),
                };
                let record = result.map_err(parse_err)?;
                let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
                let raw: C = record.deserialize(Some(&headers)).map_err(|e| CorpusError::Parse {
                    line,
                    message: e.to_string(),
                })?;
                out.push((line, J::from(raw)));
            }
        }
    }
    Ok(out)
}

/// Parses and validates a control catalog. Duplicate control ids within one
/// regulation are rejected.
pub fn parse_control_catalog<R: Read>(
    reader: R,
    format: DataFormat,
    stopwords: &StopwordList,
) -> Result<Vec<RegulationControl>> {
    let records = read_records::<RawControl, RawControl, R>(reader, format)?;
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut controls = Vec::with_capacity(records.len());
    for (line, raw) in records {
        let control = raw.validate(line, stopwords)?;
        if !seen.insert((control.regulation_id.clone(), control.control_id.clone())) {
            return Err(CorpusError::DuplicateControlId {
                line,
                regulation_id: control.regulation_id,
                control_id: control.control_id,
            });
        }
        controls.push(control);
    }
    Ok(controls)
}

pub fn load_control_catalog(path: &Path, format: DataFormat) -> Result<Vec<RegulationControl>> {
    parse_control_catalog(File::open(path)?, format, &StopwordList::english())
}

/// A non-fatal issue found while loading a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetWarning {
    pub line: usize,
    pub check_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub checks: Vec<TechspecCheck>,
    pub warnings: Vec<DatasetWarning>,
}

/// Options for dataset validation.
#[derive(Debug, Clone, Copy, Default)]
pub struct DatasetOptions<'a> {
    /// Labels are resolved against this catalog when present.
    pub catalog: Option<&'a ControlCatalog>,
    /// Escalates unknown labels from warnings to errors.
    pub strict: bool,
}

pub fn parse_techspec_dataset<R: Read>(
    reader: R,
    format: DataFormat,
    options: DatasetOptions<'_>,
) -> Result<LoadedDataset> {
    let records = read_records::<RawCheck, RawCsvCheck, R>(reader, format)?;
    let mut out = LoadedDataset::default();
    let mut ids = BTreeSet::new();
    for (line, raw) in records {
        let check = raw.validate(line)?;
        if !ids.insert(check.check_id.clone()) {
            return Err(CorpusError::InvalidCheck {
                line,
                check_id: check.check_id,
                reason: "duplicate check id".into(),
            });
        }
        if let Some(catalog) = options.catalog {
            for label in &check.labels {
                if catalog.contains(label) {
                    continue;
                }
                if options.strict {
                    return Err(CorpusError::UnknownLabel {
                        line,
                        check_id: check.check_id.clone(),
                        label: label.clone(),
                    });
                }
                out.warnings.push(DatasetWarning {
                    line,
                    check_id: check.check_id.clone(),
                    message: format!(
                        "label `{label}` is not a control of `{}`",
                        catalog.regulation_id()
                    ),
                });
            }
        }
        out.checks.push(check);
    }
    Ok(out)
}

pub fn load_techspec_dataset(
    path: &Path,
    format: DataFormat,
    options: DatasetOptions<'_>,
) -> Result<LoadedDataset> {
    parse_techspec_dataset(File::open(path)?, format, options)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut writer: W) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_controls_csv<W: Write>(controls: &[RegulationControl], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for c in controls {
        w.serialize(c).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_checks_csv<W: Write>(checks: &[TechspecCheck], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["check_id", "title", "description", "rationale", "fix", "source", "labels"])
        .map_err(csv_io)?;
    for c in checks {
        let labels = c.labels.iter().cloned().collect::<Vec<_>>().join(";");
        w.write_record([
            c.check_id.as_str(),
            &c.title,
            &c.description,
            &c.rationale,
            &c.fix,
            &c.source,
            &labels,
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> CorpusError {
    CorpusError::Io(io::Error::other(e))
}

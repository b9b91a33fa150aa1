//! Canonical data model: the 17 hypernym labels, labeled terms, label
//! catalogs, augmented records and train/validation splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::jsonl::{self, JsonlError};

/// Label names in canonical order. The position in this array is the label index.
pub const LABEL_NAMES: [&str; 17] = [
    "Equity Index",
    "Regulatory Agency",
    "Credit Index",
    "Central Securities Depository",
    "Debt pricing and yields",
    "Bonds",
    "Swap",
    "Stock Corporation",
    "Option",
    "Funds",
    "Future",
    "Credit Events",
    "MMIs",
    "Stocks",
    "Parametric schedules",
    "Forward",
    "Securities restrictions",
];

pub const NUM_LABELS: usize = LABEL_NAMES.len();

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{origin}:{line}: unknown label {name:?}")]
    UnknownLabel {
        origin: String,
        line: usize,
        name: String,
    },
    #[error("{origin}:{line}: empty term")]
    EmptyTerm { origin: String, line: usize },
    #[error("{origin}:{line}: missing label for term {term:?}")]
    MissingLabel {
        origin: String,
        line: usize,
        term: String,
    },
    #[error("cannot split {0} record(s); need at least 2")]
    TooFewToSplit(usize),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
}

/// One of the 17 hypernym labels, identified by its canonical index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelId(u8);

impl LabelId {
    pub fn new(index: usize) -> Option<Self> {
        (index < NUM_LABELS).then_some(LabelId(index as u8))
    }

    pub fn from_name(name: &str) -> Option<Self> {
        LABEL_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| LabelId(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        LABEL_NAMES[self.index()]
    }

    /// All labels in canonical order.
    pub fn all() -> impl Iterator<Item = LabelId> {
        (0..NUM_LABELS).map(|i| LabelId(i as u8))
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for LabelId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for LabelId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        LabelId::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown label {name:?}")))
    }
}

/// A gold row: a financial term and its hypernym.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTerm {
    pub term: String,
    pub label: LabelId,
}

/// A row of a terms file, where the label is absent for test sets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermRow {
    pub term: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelId>,
}

impl From<LabeledTerm> for TermRow {
    fn from(t: LabeledTerm) -> Self {
        TermRow {
            term: t.term,
            label: Some(t.label),
        }
    }
}

#[derive(Deserialize)]
struct RawRow {
    term: String,
    #[serde(default)]
    label: Option<String>,
}

/// Reads a terms file whose rows may or may not carry labels.
///
/// Exact duplicate rows are dropped (first occurrence kept); rows sharing a
/// term but carrying different labels are all retained.
pub fn load_terms(path: &Path) -> Result<Vec<TermRow>, CorpusError> {
    let origin = path.display().to_string();
    let rows: Vec<(usize, RawRow)> = jsonl::read(path)?;
    rows_to_terms(rows, &origin)
}

pub fn parse_terms(text: &str, origin: &str) -> Result<Vec<TermRow>, CorpusError> {
    let rows: Vec<(usize, RawRow)> = jsonl::parse_reader(text.as_bytes(), origin)?;
    rows_to_terms(rows, origin)
}

fn rows_to_terms(rows: Vec<(usize, RawRow)>, origin: &str) -> Result<Vec<TermRow>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, raw) in rows {
        if raw.term.trim().is_empty() {
            return Err(CorpusError::EmptyTerm {
                origin: origin.to_string(),
                line,
            });
        }
        let label = match raw.label {
            None => None,
            Some(name) => Some(LabelId::from_name(&name).ok_or_else(|| {
                CorpusError::UnknownLabel {
                    origin: origin.to_string(),
                    line,
                    name,
                }
            })?),
        };
        let row = TermRow {
            term: raw.term,
            label,
        };
        if seen.insert(row.clone()) {
            out.push(row);
        }
    }
    Ok(out)
}

/// Reads a gold terms file. Every row must carry a known label.
pub fn load_labeled_terms(path: &Path) -> Result<Vec<LabeledTerm>, CorpusError> {
    let origin = path.display().to_string();
    let rows: Vec<(usize, RawRow)> = jsonl::read(path)?;
    labeled_from_rows(rows, &origin)
}

pub fn parse_labeled_terms(text: &str, origin: &str) -> Result<Vec<LabeledTerm>, CorpusError> {
    let rows: Vec<(usize, RawRow)> = jsonl::parse_reader(text.as_bytes(), origin)?;
    labeled_from_rows(rows, origin)
}

fn labeled_from_rows(
    rows: Vec<(usize, RawRow)>,
    origin: &str,
) -> Result<Vec<LabeledTerm>, CorpusError> {
    for (line, raw) in &rows {
        if raw.label.is_none() {
            return Err(CorpusError::MissingLabel {
                origin: origin.to_string(),
                line: *line,
                term: raw.term.clone(),
            });
        }
    }
    Ok(rows_to_terms(rows, origin)?
        .into_iter()
        .map(|r| LabeledTerm {
            term: r.term,
            label: r.label.expect("checked above"),
        })
        .collect())
}

/// Shuffles with a seeded PRNG and cuts at `round(n * train_fraction)`.
pub fn split<T: Clone>(
    records: &[T],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(train_fraction));
    }
    let n = records.len();
    if n < 2 {
        return Err(CorpusError::TooFewToSplit(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * train_fraction).round() as usize;
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let valid = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, valid))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub label: LabelId,
    pub definition: String,
}

/// The natural-language definition of each label.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelCatalog {
    pub entries: Vec<CatalogEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CatalogIssue {
    Missing(LabelId),
    Duplicate(LabelId),
    EmptyDefinition(LabelId),
}

impl fmt::Display for CatalogIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CatalogIssue::Missing(l) => write!(f, "missing label {:?}", l.name()),
            CatalogIssue::Duplicate(l) => write!(f, "duplicate label {:?}", l.name()),
            CatalogIssue::EmptyDefinition(l) => write!(f, "empty definition for {:?}", l.name()),
        }
    }
}

impl LabelCatalog {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CorpusError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    /// Best-effort definitions shipped with the crate.
    pub fn bundled() -> Self {
        serde_json::from_str(include_str!("../data/label_catalog.json"))
            .expect("bundled catalog is valid")
    }

    pub fn definition(&self, label: LabelId) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.label == label)
            .map(|e| e.definition.as_str())
    }

    /// Definitions in canonical label order. Only meaningful for a valid catalog.
    pub fn definitions(&self) -> Vec<(LabelId, &str)> {
        LabelId::all()
            .filter_map(|l| self.definition(l).map(|d| (l, d)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), Vec<CatalogIssue>> {
        let mut issues = Vec::new();
        let mut counts = [0usize; NUM_LABELS];
        for e in &self.entries {
            counts[e.label.index()] += 1;
            if e.definition.trim().is_empty() {
                issues.push(CatalogIssue::EmptyDefinition(e.label));
            }
        }
        for label in LabelId::all() {
            match counts[label.index()] {
                0 => issues.push(CatalogIssue::Missing(label)),
                1 => {}
                _ => issues.push(CatalogIssue::Duplicate(label)),
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

/// Where an augmented surface came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    Original,
    AcronymExpansion,
    DBpedia,
    #[serde(rename = "FIBO")]
    Fibo,
    Investopedia,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Original => "Original",
            Source::AcronymExpansion => "AcronymExpansion",
            Source::DBpedia => "DBpedia",
            Source::Fibo => "FIBO",
            Source::Investopedia => "Investopedia",
        })
    }
}

/// One surface realization of a term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub term: String,
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelId>,
    pub source: Source,
}

impl AugmentedRecord {
    pub fn original(term: &str, label: Option<LabelId>) -> Self {
        AugmentedRecord {
            term: term.to_string(),
            surface: term.to_string(),
            label,
            source: Source::Original,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<AugmentedRecord>,
    pub counts_by_source: BTreeMap<Source, usize>,
}

impl Dataset {
    pub fn new(records: Vec<AugmentedRecord>) -> Self {
        let mut counts_by_source = BTreeMap::new();
        for r in &records {
            *counts_by_source.entry(r.source).or_insert(0) += 1;
        }
        Dataset {
            records,
            counts_by_source,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let rows: Vec<(usize, AugmentedRecord)> = jsonl::read(path)?;
        Ok(Dataset::new(rows.into_iter().map(|(_, r)| r).collect()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Surfaces grouped by term, in order of first appearance.
    pub fn occurrences(&self) -> Vec<(&str, Vec<&str>)> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut groups: Vec<(&str, Vec<&str>)> = Vec::new();
        for r in &self.records {
            match index.get(r.term.as_str()) {
                Some(&i) => {
                    if !groups[i].1.contains(&r.surface.as_str()) {
                        groups[i].1.push(&r.surface)
                    }
                }
                None => {
                    index.insert(&r.term, groups.len());
                    groups.push((&r.term, vec![&r.surface]));
                }
            }
        }
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(name: &str) -> LabelId {
        LabelId::from_name(name).unwrap()
    }

    #[test]
    fn label_order_is_canonical() {
        assert_eq!(LabelId::all().count(), 17);
        assert_eq!(label("Equity Index").index(), 0);
        assert_eq!(label("Securities restrictions").index(), 16);
        let names: HashSet<_> = LABEL_NAMES.iter().collect();
        assert_eq!(names.len(), 17);
        assert!(LabelId::from_name("bonds").is_none());
    }

    #[test]
    fn exact_duplicates_removed_conflicts_kept() {
        let text = r#"{"term": "x", "label": "Bonds"}
{"term": "x", "label": "Bonds"}
{"term": "y", "label": "Bonds"}
{"term": "y", "label": "Swap"}"#;
        let rows = parse_labeled_terms(text, "t").unwrap();
        assert_eq!(
            rows,
            vec![
                LabeledTerm { term: "x".into(), label: label("Bonds") },
                LabeledTerm { term: "y".into(), label: label("Bonds") },
                LabeledTerm { term: "y".into(), label: label("Swap") },
            ]
        );
    }

    #[test]
    fn unknown_label_names_the_row() {
        let text = "{\"term\": \"x\", \"label\": \"Bonds\"}\n{\"term\": \"z\", \"label\": \"Bond\"}";
        let err = parse_labeled_terms(text, "terms.jsonl").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("terms.jsonl:2"), "{msg}");
        assert!(msg.contains("Bond"), "{msg}");
    }

    #[test]
    fn empty_term_is_fatal() {
        let err = parse_labeled_terms("{\"term\": \"  \", \"label\": \"Bonds\"}", "t").unwrap_err();
        assert!(matches!(err, CorpusError::EmptyTerm { line: 1, .. }));
    }

    #[test]
    fn test_rows_may_omit_labels() {
        let rows = parse_terms("{\"term\": \"nav\"}\n", "t").unwrap();
        assert_eq!(rows[0].label, None);
        assert!(parse_labeled_terms("{\"term\": \"nav\"}\n", "t").is_err());
    }

    #[test]
    fn dedup_of_1050_rows() {
        let mut text = String::new();
        for i in 0..1040 {
            let l = LABEL_NAMES[i % 17];
            text.push_str(&format!("{{\"term\": \"term {i}\", \"label\": \"{l}\"}}\n"));
        }
        for i in 0..10 {
            let l = LABEL_NAMES[i % 17];
            text.push_str(&format!("{{\"term\": \"term {i}\", \"label\": \"{l}\"}}\n"));
        }
        assert_eq!(parse_labeled_terms(&text, "t").unwrap().len(), 1040);
    }

    #[test]
    fn split_sizes() {
        let v: Vec<usize> = (0..1040).collect();
        let (a, b) = split(&v, 0.8, 42).unwrap();
        assert_eq!((a.len(), b.len()), (832, 208));
        let v: Vec<usize> = (0..10).collect();
        let (a, b) = split(&v, 0.8, 7).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, v);
    }

    #[test]
    fn split_is_seeded() {
        let v: Vec<usize> = (0..100).collect();
        assert_eq!(split(&v, 0.8, 3).unwrap(), split(&v, 0.8, 3).unwrap());
        assert_ne!(split(&v, 0.8, 3).unwrap(), split(&v, 0.8, 4).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split(&[1], 0.8, 0), Err(CorpusError::TooFewToSplit(1))));
        assert!(matches!(split(&[1, 2], 1.0, 0), Err(CorpusError::BadFraction(_))));
        assert!(matches!(split(&[1, 2], 0.0, 0), Err(CorpusError::BadFraction(_))));
    }

    #[test]
    fn catalog_validation() {
        let full = LabelCatalog::bundled();
        assert_eq!(full.validate(), Ok(()));

        let mut short = full.clone();
        short.entries.retain(|e| e.label != label("Option"));
        assert_eq!(short.validate(), Err(vec![CatalogIssue::Missing(label("Option"))]));

        let mut dup = full.clone();
        dup.entries.push(CatalogEntry {
            label: label("Bonds"),
            definition: "again".into(),
        });
        assert_eq!(dup.validate(), Err(vec![CatalogIssue::Duplicate(label("Bonds"))]));

        let mut empty = full;
        empty.entries[0].definition = " ".into();
        assert_eq!(
            empty.validate(),
            Err(vec![CatalogIssue::EmptyDefinition(LabelId::new(0).unwrap())])
        );
    }

    #[test]
    fn dataset_counts_sum_to_len() {
        let ds = Dataset::new(vec![
            AugmentedRecord::original("a", None),
            AugmentedRecord::original("b", None),
            AugmentedRecord {
                term: "a".into(),
                surface: "alpha".into(),
                label: None,
                source: Source::AcronymExpansion,
            },
        ]);
        assert_eq!(ds.counts_by_source.values().sum::<usize>(), ds.len());
        assert_eq!(ds.occurrences(), vec![("a", vec!["a", "alpha"]), ("b", vec!["b"])]);
    }
}

//! Definitions for terms from a lookup service (DBpedia-style) and from
//! exact-match glossaries, plus assembly of the augmented dataset.
//!
//! Lookup candidates are accepted by token overlap between the cleaned term
//! (`s1`) and the cleaned candidate label (`s2`):
//!
//! ```text
//! ratio1 = |s1 ∩ s2| / |s1|      ratio2 = |s2| / |s1|
//! accept iff ratio1 >= 1.0 and ratio2 <= 1.25
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acronym::{expand_term, AcronymTable};
use crate::corpus::{AugmentedRecord, Dataset, Source, TermRow};
use crate::jsonl::{self, JsonlError};
use crate::textnorm::{clean, token_set, TokenSet};

#[derive(Debug, thiserror::Error)]
pub enum GlossaryError {
    #[error("term has no tokens after cleaning")]
    EmptyTokenSet,
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LookupError {
    #[error("lookup query is empty")]
    EmptyQuery,
    #[error("lookup for {query:?} failed: {message}")]
    Transport { query: String, message: String },
    #[error("lookup for {query:?} returned a malformed payload: {message}")]
    Malformed { query: String, message: String },
}

impl LookupError {
    pub fn is_retriable(&self) -> bool {
        !matches!(self, LookupError::EmptyQuery)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapRatios {
    pub ratio1: f64,
    pub ratio2: f64,
}

pub fn overlap_ratios(s1: &TokenSet, s2: &TokenSet) -> Result<OverlapRatios, GlossaryError> {
    if s1.is_empty() {
        return Err(GlossaryError::EmptyTokenSet);
    }
    let n1 = s1.len() as f64;
    let shared = s1.intersection(s2).count() as f64;
    Ok(OverlapRatios {
        ratio1: shared / n1,
        ratio2: s2.len() as f64 / n1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    pub min_ratio1: f64,
    pub max_ratio2: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        MatchThresholds {
            min_ratio1: 1.0,
            max_ratio2: 1.25,
        }
    }
}

pub fn accept_match(r: OverlapRatios, th: &MatchThresholds) -> bool {
    r.ratio1 >= th.min_ratio1 && r.ratio2 <= th.max_ratio2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupCandidate {
    pub label: String,
    pub description: String,
    /// Position in the service's result order.
    pub score_rank: usize,
}

/// Source of lookup candidates for a query string.
pub trait Lookup: Sync {
    fn lookup(&self, query: &str) -> Result<Vec<LookupCandidate>, LookupError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedCandidate {
    pub label: String,
    pub description: String,
}

/// Query to candidate list, persisted as a JSON map.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LookupCache {
    pub entries: BTreeMap<String, Vec<CachedCandidate>>,
}

impl LookupCache {
    pub fn load(path: &Path) -> Result<Self, GlossaryError> {
        let text = std::fs::read_to_string(path).map_err(|e| GlossaryError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| GlossaryError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn insert(&mut self, query: &str, candidates: &[LookupCandidate]) {
        self.entries.insert(
            query.to_string(),
            candidates
                .iter()
                .map(|c| CachedCandidate {
                    label: c.label.clone(),
                    description: c.description.clone(),
                })
                .collect(),
        );
    }
}

impl Lookup for LookupCache {
    /// A cache miss is an empty result, not an error.
    fn lookup(&self, query: &str) -> Result<Vec<LookupCandidate>, LookupError> {
        if query.trim().is_empty() {
            return Err(LookupError::EmptyQuery);
        }
        Ok(self
            .entries
            .get(query)
            .map(|cands| {
                cands
                    .iter()
                    .enumerate()
                    .map(|(i, c)| LookupCandidate {
                        label: c.label.clone(),
                        description: c.description.clone(),
                        score_rank: i,
                    })
                    .collect()
            })
            .unwrap_or_default())
    }
}

#[derive(Debug, Clone)]
pub struct HttpLookupConfig {
    pub base_url: String,
    pub max_results: usize,
    pub timeout: Duration,
}

impl Default for HttpLookupConfig {
    fn default() -> Self {
        HttpLookupConfig {
            base_url: "https://lookup.dbpedia.org/api/search".to_string(),
            max_results: 5,
            timeout: Duration::from_secs(10),
        }
    }
}

/// Live lookup over HTTP: `GET <base>?query=..&format=JSON&maxResults=k`.
pub struct HttpLookup {
    cfg: HttpLookupConfig,
    client: reqwest::blocking::Client,
}

impl HttpLookup {
    pub fn new(cfg: HttpLookupConfig) -> Result<Self, LookupError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| LookupError::Transport {
                query: String::new(),
                message: e.to_string(),
            })?;
        Ok(HttpLookup { cfg, client })
    }
}

impl Lookup for HttpLookup {
    fn lookup(&self, query: &str) -> Result<Vec<LookupCandidate>, LookupError> {
        if query.trim().is_empty() {
            return Err(LookupError::EmptyQuery);
        }
        let transport = |e: reqwest::Error| LookupError::Transport {
            query: query.to_string(),
            message: e.to_string(),
        };
        let body = self
            .client
            .get(&self.cfg.base_url)
            .query(&[
                ("query", query),
                ("format", "JSON"),
                ("maxResults", &self.cfg.max_results.to_string()),
            ])
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(transport)?
            .text()
            .map_err(transport)?;
        parse_lookup_response(query, &body)
    }
}

/// Wraps a lookup and records every successful answer into a cache.
pub struct RecordingLookup<L> {
    inner: L,
    cache: Mutex<LookupCache>,
}

impl<L: Lookup> RecordingLookup<L> {
    pub fn new(inner: L, seed: LookupCache) -> Self {
        RecordingLookup {
            inner,
            cache: Mutex::new(seed),
        }
    }

    pub fn into_cache(self) -> LookupCache {
        self.cache.into_inner().expect("cache lock poisoned")
    }
}

impl<L: Lookup> Lookup for RecordingLookup<L> {
    fn lookup(&self, query: &str) -> Result<Vec<LookupCandidate>, LookupError> {
        let found = self.inner.lookup(query)?;
        self.cache
            .lock()
            .expect("cache lock poisoned")
            .insert(query, &found);
        Ok(found)
    }
}

fn strip_tags(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_tag = false;
    for c in s.chars() {
        match c {
            '<' => in_tag = true,
            '>' if in_tag => in_tag = false,
            _ if !in_tag => out.push(c),
            _ => {}
        }
    }
    out.trim().to_string()
}

/// A field that may be a string or an array of strings; the first non-empty value wins.
fn first_text(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) => Some(strip_tags(s)).filter(|s| !s.is_empty()),
        Value::Array(items) => items.iter().find_map(|i| first_text(Some(i))),
        _ => None,
    }
}

/// Parses a lookup payload: an object with a `docs` array whose items carry
/// `label` and `comment` or `description` (string or array). Highlighting
/// markup such as `<B>..</B>` is stripped.
pub fn parse_lookup_response(query: &str, body: &str) -> Result<Vec<LookupCandidate>, LookupError> {
    let malformed = |message: String| LookupError::Malformed {
        query: query.to_string(),
        message,
    };
    let value: Value = serde_json::from_str(body).map_err(|e| malformed(e.to_string()))?;
    let docs = value
        .get("docs")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing `docs` array".to_string()))?;
    let mut out = Vec::new();
    for doc in docs {
        let Some(label) = first_text(doc.get("label")) else {
            continue;
        };
        let description = first_text(doc.get("comment"))
            .or_else(|| first_text(doc.get("description")))
            .unwrap_or_default();
        out.push(LookupCandidate {
            label,
            description,
            score_rank: out.len(),
        });
    }
    Ok(out)
}

/// Picks the description of the best accepted candidate: max ratio1, then
/// min ratio2, then service order. Candidates without a description are ignored.
pub fn match_lookup<'a>(
    term: &str,
    candidates: &'a [LookupCandidate],
    th: &MatchThresholds,
) -> Option<&'a str> {
    let s1 = token_set(&clean(term));
    candidates
        .iter()
        .filter(|c| !c.description.trim().is_empty())
        .filter_map(|c| {
            let r = overlap_ratios(&s1, &token_set(&clean(&c.label))).ok()?;
            accept_match(r, th).then_some((r, c))
        })
        .min_by(|(ra, ca), (rb, cb)| {
            rb.ratio1
                .total_cmp(&ra.ratio1)
                .then(ra.ratio2.total_cmp(&rb.ratio2))
                .then(ca.score_rank.cmp(&cb.score_rank))
        })
        .map(|(_, c)| c.description.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GlossarySource {
    #[serde(rename = "FIBO")]
    Fibo,
    Investopedia,
}

impl From<GlossarySource> for Source {
    fn from(s: GlossarySource) -> Self {
        match s {
            GlossarySource::Fibo => Source::Fibo,
            GlossarySource::Investopedia => Source::Investopedia,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossaryEntry {
    pub term: String,
    pub definition: String,
    pub source: GlossarySource,
}

pub fn load_glossary(path: &Path) -> Result<Vec<GlossaryEntry>, GlossaryError> {
    let rows: Vec<(usize, GlossaryEntry)> = jsonl::read(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, e) in rows {
        if e.term.trim().is_empty() || e.definition.trim().is_empty() {
            return Err(GlossaryError::File {
                path: path.display().to_string(),
                message: format!("line {line}: empty term or definition"),
            });
        }
        out.push(e);
    }
    Ok(out)
}

/// First entry whose cleaned term equals the cleaned query.
pub fn match_exact<'a>(term: &str, glossary: &'a [GlossaryEntry]) -> Option<&'a GlossaryEntry> {
    let key = clean(term);
    if key.is_empty() {
        return None;
    }
    glossary.iter().find(|e| clean(&e.term) == key)
}

/// Pre-cleaned glossary keyed by source, keeping the first entry per cleaned term.
#[derive(Debug, Clone, Default)]
pub struct GlossaryIndex {
    by_source: BTreeMap<Source, HashMap<String, GlossaryEntry>>,
}

impl GlossaryIndex {
    pub fn new(entries: &[GlossaryEntry]) -> Self {
        let mut by_source: BTreeMap<Source, HashMap<String, GlossaryEntry>> = BTreeMap::new();
        for e in entries {
            let key = clean(&e.term);
            if key.is_empty() {
                continue;
            }
            by_source
                .entry(e.source.into())
                .or_default()
                .entry(key.into_string())
                .or_insert_with(|| e.clone());
        }
        GlossaryIndex { by_source }
    }

    pub fn lookup(&self, source: Source, term: &str) -> Option<&GlossaryEntry> {
        self.by_source.get(&source)?.get(clean(term).as_str())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub thresholds: MatchThresholds,
    /// Upper bound on concurrent lookups.
    pub max_in_flight: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            thresholds: MatchThresholds::default(),
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupFailure {
    pub term: String,
    pub error: LookupError,
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub dataset: Dataset,
    pub failures: Vec<LookupFailure>,
}

/// Emits the original record for every term plus at most one record per
/// source that fired. Lookup errors are collected, never fatal.
pub fn augment(
    terms: &[TermRow],
    table: &AcronymTable,
    glossary: &GlossaryIndex,
    lookup: Option<&dyn Lookup>,
    cfg: &AugmentConfig,
) -> AugmentOutcome {
    let lookups: Vec<Option<Result<Vec<LookupCandidate>, LookupError>>> = match lookup {
        None => vec![None; terms.len()],
        Some(l) => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.max_in_flight.max(1))
                .build()
                .expect("thread pool");
            pool.install(|| {
                terms
                    .par_iter()
                    .map(|t| Some(l.lookup(&t.term)))
                    .collect()
            })
        }
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (row, found) in terms.iter().zip(lookups) {
        let mut push = |surface: String, source: Source| {
            records.push(AugmentedRecord {
                term: row.term.clone(),
                surface,
                label: row.label,
                source,
            })
        };
        push(row.term.clone(), Source::Original);
        if let Some(expanded) = expand_term(&row.term, table) {
            push(expanded, Source::AcronymExpansion);
        }
        match found {
            Some(Ok(cands)) => {
                if let Some(desc) = match_lookup(&row.term, &cands, &cfg.thresholds) {
                    push(desc.to_string(), Source::DBpedia);
                }
            }
            Some(Err(error)) => failures.push(LookupFailure {
                term: row.term.clone(),
                error,
            }),
            None => {}
        }
        for source in [Source::Fibo, Source::Investopedia] {
            if let Some(e) = glossary.lookup(source, &row.term) {
                push(e.definition.clone(), source);
            }
        }
    }
    AugmentOutcome {
        dataset: Dataset::new(records),
        failures,
    }
}

//! Acronym harvesting from prospectus-like text.
//!
//! Candidates are found with the Schwartz–Hearst alignment: for every
//! `long form (SHORT)` pattern, the characters of `SHORT` are matched
//! right-to-left against the words preceding the parenthesis, with the first
//! character required to start a word. Candidates then pass four exclusion
//! rules before being folded into an [`AcronymTable`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::textnorm::clean;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcronymEntry {
    pub short: String,
    pub long: String,
    pub doc_id: String,
}

/// Characters that close a sentence and therefore bound the long-form window.
const SENTENCE_END: [char; 5] = ['.', '!', '?', ';', ':'];

fn valid_short_form(sf: &str) -> bool {
    let len = sf.chars().count();
    (2..=10).contains(&len)
        && sf.split_whitespace().count() <= 2
        && sf.chars().any(char::is_alphabetic)
        && sf.chars().next().is_some_and(char::is_alphanumeric)
}

/// Right-to-left character alignment of `short` inside `long`. Returns the
/// suffix of `long` starting at the word holding the first short-form character.
fn best_long_form<'a>(short: &str, long: &'a str) -> Option<&'a str> {
    let sf: Vec<char> = short.chars().flat_map(char::to_lowercase).collect();
    let lf: Vec<(usize, char)> = long
        .char_indices()
        .map(|(i, c)| (i, c.to_lowercase().next().unwrap_or(c)))
        .collect();
    let mut s_idx = sf.len() as isize - 1;
    let mut l_idx = lf.len() as isize - 1;
    while s_idx >= 0 {
        let current = sf[s_idx as usize];
        if !current.is_alphanumeric() {
            s_idx -= 1;
            continue;
        }
        while l_idx >= 0
            && (lf[l_idx as usize].1 != current
                || (s_idx == 0 && l_idx > 0 && lf[l_idx as usize - 1].1.is_alphanumeric()))
        {
            l_idx -= 1;
        }
        if l_idx < 0 {
            return None;
        }
        l_idx -= 1;
        s_idx -= 1;
    }
    let match_start = lf[(l_idx + 1) as usize].0;
    let word_start = long[..match_start].rfind(' ').map_or(0, |i| i + 1);
    Some(&long[word_start..])
}

/// Finds every `long form (SHORT)` pair in `doc`.
pub fn extract_candidates(doc: &str, doc_id: &str) -> Vec<AcronymEntry> {
    let mut out = Vec::new();
    let mut cursor = 0;
    while let Some(rel_open) = doc[cursor..].find('(') {
        let open = cursor + rel_open;
        cursor = open + 1;
        let Some(rel_close) = doc[open + 1..].find([')', '(']) else {
            break;
        };
        let close = open + 1 + rel_close;
        if doc[close..].starts_with('(') {
            continue;
        }
        let short = doc[open + 1..close].trim();
        if !valid_short_form(short) {
            continue;
        }
        let sf_len = short.chars().count();
        let max_words = (sf_len + 5).min(sf_len * 2);

        let mut window: Vec<&str> = Vec::new();
        for word in doc[..open].split_whitespace().rev() {
            if window.len() == max_words || word.ends_with(SENTENCE_END) {
                break;
            }
            window.push(word);
        }
        if window.is_empty() {
            continue;
        }
        window.reverse();
        let candidate = window.join(" ");
        if let Some(long) = best_long_form(short, &candidate) {
            out.push(AcronymEntry {
                short: short.to_string(),
                long: long.to_string(),
                doc_id: doc_id.to_string(),
            });
        }
    }
    out
}

/// The four exclusion rules, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum FilterRule {
    /// Expansion is not longer than the acronym.
    ExpansionNotLonger,
    /// Expansion contains a parenthesis.
    ExpansionHasParenthesis,
    /// The acronym is itself an English word.
    AcronymIsWord,
    /// Expansion has at most five characters.
    ExpansionTooShort,
}

impl FilterRule {
    pub const ALL: [FilterRule; 4] = [
        FilterRule::ExpansionNotLonger,
        FilterRule::ExpansionHasParenthesis,
        FilterRule::AcronymIsWord,
        FilterRule::ExpansionTooShort,
    ];

    pub fn rejects(self, entry: &AcronymEntry, wordlist: &Wordlist) -> bool {
        let long_len = entry.long.chars().count();
        match self {
            FilterRule::ExpansionNotLonger => long_len <= entry.short.chars().count(),
            FilterRule::ExpansionHasParenthesis => entry.long.contains(['(', ')']),
            FilterRule::AcronymIsWord => wordlist.contains(&entry.short.to_lowercase()),
            FilterRule::ExpansionTooShort => long_len <= 5,
        }
    }
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterRule::ExpansionNotLonger => "expansion-not-longer",
            FilterRule::ExpansionHasParenthesis => "expansion-has-parenthesis",
            FilterRule::AcronymIsWord => "acronym-is-word",
            FilterRule::ExpansionTooShort => "expansion-too-short",
        })
    }
}

/// Lowercase English lexicon used by [`FilterRule::AcronymIsWord`].
#[derive(Debug, Clone, Default)]
pub struct Wordlist(HashSet<String>);

impl Wordlist {
    pub fn bundled() -> Self {
        Self::parse(include_str!("../data/english_words.txt"))
    }

    pub fn parse(text: &str) -> Self {
        Wordlist(
            text.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for Wordlist {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Wordlist(iter.into_iter().map(Into::into).collect())
    }
}

/// First rule (in [`FilterRule::ALL`] order) that rejects `entry`.
pub fn rejection(entry: &AcronymEntry, wordlist: &Wordlist) -> Option<FilterRule> {
    FilterRule::ALL
        .into_iter()
        .find(|rule| rule.rejects(entry, wordlist))
}

pub fn filter_entries(entries: &[AcronymEntry], wordlist: &Wordlist) -> Vec<AcronymEntry> {
    filter_with_stats(entries, wordlist).0
}

/// Drop counts attribute each rejected entry to the first rule it fails.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterStats {
    pub candidates: usize,
    pub dropped: BTreeMap<String, usize>,
    pub kept: usize,
}

pub fn filter_with_stats(
    entries: &[AcronymEntry],
    wordlist: &Wordlist,
) -> (Vec<AcronymEntry>, FilterStats) {
    let mut stats = FilterStats {
        candidates: entries.len(),
        dropped: FilterRule::ALL.iter().map(|r| (r.to_string(), 0)).collect(),
        kept: 0,
    };
    let mut kept = Vec::new();
    for e in entries {
        match rejection(e, wordlist) {
            Some(rule) => *stats.dropped.get_mut(&rule.to_string()).unwrap() += 1,
            None => kept.push(e.clone()),
        }
    }
    stats.kept = kept.len();
    (kept, stats)
}

/// Cleaned short form to long form; the first entry seen for a key wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AcronymTable {
    pub entries: BTreeMap<String, String>,
}

impl AcronymTable {
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = &'a AcronymEntry>) -> Self {
        let mut table = AcronymTable::default();
        for e in entries {
            let key = clean(&e.short);
            if key.is_empty() {
                continue;
            }
            table
                .entries
                .entry(key.into_string())
                .or_insert_with(|| e.long.clone());
        }
        table
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Extraction over an ordered list of `(doc_id, text)` documents followed by
/// filtering and the first-seen fold.
pub fn build_table(
    docs: &[(String, String)],
    wordlist: &Wordlist,
) -> (AcronymTable, Vec<AcronymEntry>, FilterStats) {
    use rayon::prelude::*;
    let candidates: Vec<AcronymEntry> = docs
        .par_iter()
        .map(|(id, text)| extract_candidates(text, id))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let (kept, stats) = filter_with_stats(&candidates, wordlist);
    (AcronymTable::from_entries(&kept), kept, stats)
}

/// Expands a term through the table: a whole-term hit returns the long form,
/// otherwise the first token (left to right) that is a key is replaced.
pub fn expand_term(term: &str, table: &AcronymTable) -> Option<String> {
    let whole = clean(term);
    if let Some(long) = table.get(whole.as_str()) {
        return (long != term).then(|| long.to_string());
    }
    let raw: Vec<&str> = term.split_whitespace().collect();
    for (i, tok) in raw.iter().enumerate() {
        if let Some(long) = table.get(clean(tok).as_str()) {
            let mut parts = raw.clone();
            parts[i] = long;
            let expanded = parts.join(" ");
            return (expanded != term).then_some(expanded);
        }
    }
    let tokens: Vec<&str> = whole.tokens().collect();
    for (i, tok) in tokens.iter().enumerate() {
        if let Some(long) = table.get(tok) {
            let mut parts = tokens.clone();
            parts[i] = long;
            let expanded = parts.join(" ");
            return (expanded != term).then_some(expanded);
        }
    }
    None
}

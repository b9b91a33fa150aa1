//! Term cleaning: lowercase, punctuation to space, whitespace collapse and
//! rule-based singularization. Every comparison of terms against glossary
//! entries or lookup labels goes through [`clean`].

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::OnceLock;

use unicode_general_category::{get_general_category, GeneralCategory as Gc};

/// Lowercase, punctuation-free, single-spaced text with singular tokens.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CleanText(String);

impl CleanText {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ').filter(|t| !t.is_empty())
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for CleanText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A de-duplicated set of cleaned tokens.
pub type TokenSet = BTreeSet<String>;

/// Plural to singular overrides consulted before the suffix rules.
#[derive(Debug, Clone, Default)]
pub struct Exceptions(HashMap<String, String>);

const BUILTIN_EXCEPTIONS: &[(&str, &str)] = &[
    ("series", "series"),
    ("species", "species"),
    ("news", "news"),
    ("analysis", "analysis"),
    ("basis", "basis"),
    ("crisis", "crisis"),
    ("thesis", "thesis"),
    ("axis", "axis"),
    ("bias", "bias"),
    ("alias", "alias"),
    ("canvas", "canvas"),
    ("atlas", "atlas"),
    ("gas", "gas"),
    ("this", "this"),
    ("always", "always"),
    ("whereas", "whereas"),
    ("perhaps", "perhaps"),
    ("mathematics", "mathematics"),
    ("economics", "economics"),
    ("statistics", "statistics"),
    ("indices", "index"),
    ("matrices", "matrix"),
    ("vertices", "vertex"),
    ("analyses", "analysis"),
    ("bases", "basis"),
    ("crises", "crisis"),
    ("theses", "thesis"),
    ("criteria", "criterion"),
    ("data", "data"),
    ("men", "man"),
    ("women", "woman"),
    ("people", "person"),
    ("children", "child"),
];

impl Exceptions {
    pub fn builtin() -> Self {
        Exceptions(
            BUILTIN_EXCEPTIONS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }

    /// Built-in overrides extended (and overridden) by a JSON map `plural -> singular`.
    pub fn with_overrides(overrides: HashMap<String, String>) -> Self {
        let mut ex = Self::builtin();
        ex.0.extend(overrides);
        ex
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::with_overrides(serde_json::from_str(text)?))
    }

    pub fn get(&self, token: &str) -> Option<&str> {
        self.0.get(token).map(String::as_str)
    }
}

fn builtin_exceptions() -> &'static Exceptions {
    static EX: OnceLock<Exceptions> = OnceLock::new();
    EX.get_or_init(Exceptions::builtin)
}

fn is_separator(c: char) -> bool {
    if c.is_whitespace() {
        return true;
    }
    matches!(
        get_general_category(c),
        Gc::ConnectorPunctuation
            | Gc::DashPunctuation
            | Gc::OpenPunctuation
            | Gc::ClosePunctuation
            | Gc::InitialPunctuation
            | Gc::FinalPunctuation
            | Gc::OtherPunctuation
            | Gc::MathSymbol
            | Gc::CurrencySymbol
            | Gc::ModifierSymbol
            | Gc::OtherSymbol
            | Gc::Control
            | Gc::Format
            | Gc::Surrogate
            | Gc::PrivateUse
            | Gc::Unassigned
            | Gc::SpaceSeparator
            | Gc::LineSeparator
            | Gc::ParagraphSeparator
    )
}

/// Cleans with the built-in singularization exceptions.
pub fn clean(raw: &str) -> CleanText {
    clean_with(raw, builtin_exceptions())
}

pub fn clean_with(raw: &str, exceptions: &Exceptions) -> CleanText {
    let lowered: String = raw
        .to_lowercase()
        .chars()
        .map(|c| if is_separator(c) { ' ' } else { c })
        .collect();
    let tokens: Vec<String> = lowered
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| singularize_with(t, exceptions))
        .collect();
    CleanText(tokens.join(" "))
}

pub fn singularize(token: &str) -> String {
    singularize_with(token, builtin_exceptions())
}

/// Rule-based English singular of a lowercase, punctuation-free token.
pub fn singularize_with(token: &str, exceptions: &Exceptions) -> String {
    if let Some(s) = exceptions.get(token) {
        return s.to_string();
    }
    let singular = apply_suffix_rules(token);
    match exceptions.get(&singular) {
        Some(s) => s.to_string(),
        None => singular,
    }
}

fn apply_suffix_rules(token: &str) -> String {
    if token.chars().count() <= 3 {
        return token.to_string();
    }
    if let Some(stem) = token.strip_suffix("ies") {
        return format!("{stem}y");
    }
    for suffix in ["sses", "xes", "ches", "shes"] {
        if token.ends_with(suffix) {
            return token[..token.len() - 2].to_string();
        }
    }
    if token.ends_with('s') && !token.ends_with("ss") && !token.ends_with("us") {
        return token[..token.len() - 1].to_string();
    }
    token.to_string()
}

pub fn token_set(clean: &CleanText) -> TokenSet {
    clean.tokens().map(str::to_string).collect()
}

//! Pipeline configuration read from a TOML file; command-line flags win.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use hyperrank_core::pairgen::PairGenConfig;
use hyperrank_core::rankeval::ClassifierConfig;
use hyperrank_core::simtrain::TrainConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub split: SplitSection,
    pub lookup: LookupSection,
    pub pairs: PairsSection,
    pub embed: EmbedSection,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
}

/// Shared resources; per-command inputs and outputs are given as flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: Option<PathBuf>,
    pub wordlist: Option<PathBuf>,
    pub glossaries: Vec<PathBuf>,
    pub lookup_cache: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { fraction: 0.8 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LookupSection {
    /// Query the live service for terms missing from the cache.
    pub enabled: bool,
    pub base_url: String,
    pub max_results: usize,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub min_ratio1: f64,
    pub max_ratio2: f64,
}

impl Default for LookupSection {
    fn default() -> Self {
        let http = hyperrank_core::glossary::HttpLookupConfig::default();
        let th = hyperrank_core::glossary::MatchThresholds::default();
        LookupSection {
            enabled: false,
            base_url: http.base_url,
            max_results: http.max_results,
            timeout_secs: http.timeout.as_secs(),
            max_in_flight: 4,
            min_ratio1: th.min_ratio1,
            max_ratio2: th.max_ratio2,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsSection {
    pub k: f64,
    pub negatives_per_positive: usize,
    pub target_zero_fraction: f64,
}

impl Default for PairsSection {
    fn default() -> Self {
        let d = PairGenConfig::default();
        PairsSection {
            k: d.k,
            negatives_per_positive: d.negatives_per_positive,
            target_zero_fraction: d.target_zero_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Hashed TF-IDF vectors computed locally.
    Baseline,
    /// Vectors from an HTTP embedding service.
    Remote,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub backend: BackendKind,
    /// Baseline bucket count (power of two) or remote vector width.
    pub dim: Option<usize>,
    pub hash_seed: u64,
    pub url: Option<String>,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let r = hyperrank_core::embed::RemoteConfig::default();
        EmbedSection {
            backend: BackendKind::Baseline,
            dim: None,
            hash_seed: 0,
            url: None,
            batch_size: r.batch_size,
            max_in_flight: r.max_in_flight,
            max_retries: r.max_retries,
            initial_backoff_ms: r.initial_backoff_ms,
            timeout_ms: r.timeout_ms,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

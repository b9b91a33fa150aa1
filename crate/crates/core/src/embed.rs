//! Sentence vectors: the backend contract, a feature-hashed TF-IDF baseline,
//! a client for an external embedding service, and cosine similarity.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::textnorm::clean;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding must have at least one dimension")]
    Empty,
    #[error("embedding contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding service protocol error: {0}")]
    Protocol(String),
    #[error("embedding service failed for texts {start}..{end}: {message}")]
    Transport {
        start: usize,
        end: usize,
        message: String,
    },
    #[error("{0}")]
    Io(String),
}

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = EmbedError;

    fn try_from(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        Ok(Embedding { values })
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        values.try_into()
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Embedding {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Non-zero coordinates as `(index, value)`.
    pub fn nonzeros(&self) -> Vec<(usize, f64)> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect()
    }

    pub fn scaled(&self, alpha: f64) -> Embedding {
        Embedding {
            values: self.values.iter().map(|v| v * alpha).collect(),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`. Zero vectors are an error.
pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64, EmbedError> {
    if u.dim() != v.dim() {
        return Err(EmbedError::DimMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    let uu = dot(&u.values, &u.values);
    let vv = dot(&v.values, &v.values);
    if uu == 0.0 || vv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot(&u.values, &v.values) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// Turns texts into vectors. Implementations must be deterministic and
/// stateless across items: embedding a concatenated batch equals
/// concatenating the embeddings of its parts.
pub trait EmbeddingBackend: Sync {
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError>;
}

/// Smoothed inverse document frequencies over cleaned tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdfWeights {
    pub weights: BTreeMap<String, f64>,
}

impl IdfWeights {
    /// `idf(t) = ln((1 + N) / (1 + df(t))) + 1`.
    pub fn fit<S: AsRef<str>>(corpus: &[S]) -> Self {
        let n = corpus.len() as f64;
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            let c = clean(doc.as_ref());
            let mut seen: Vec<&str> = c.tokens().collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t.to_string()).or_insert(0) += 1;
            }
        }
        IdfWeights {
            weights: df
                .into_iter()
                .map(|(t, d)| (t, ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0))
                .collect(),
        }
    }

    /// Unseen tokens weigh 1.0.
    pub fn get(&self, token: &str) -> f64 {
        self.weights.get(token).copied().unwrap_or(1.0)
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EmbedError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| EmbedError::Io(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Number of hash buckets; must be a power of two.
    pub dim: usize,
    pub hash_seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            dim: 32768,
            hash_seed: 0,
        }
    }
}

/// Signed feature hashing of TF-IDF weighted tokens, L2-normalized.
#[derive(Debug, Clone)]
pub struct BaselineEmbedder {
    cfg: BaselineConfig,
    idf: IdfWeights,
}

impl BaselineEmbedder {
    pub fn new(cfg: BaselineConfig, idf: IdfWeights) -> Result<Self, EmbedError> {
        if cfg.dim == 0 || !cfg.dim.is_power_of_two() {
            return Err(EmbedError::Protocol(format!(
                "baseline dimension must be a power of two, got {}",
                cfg.dim
            )));
        }
        Ok(BaselineEmbedder { cfg, idf })
    }

    pub fn config(&self) -> BaselineConfig {
        self.cfg
    }

    fn bucket(&self, token: &str) -> (usize, f64) {
        let h = XxHash64::oneshot(self.cfg.hash_seed, token.as_bytes());
        let index = (h as usize) & (self.cfg.dim - 1);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (index, sign)
    }

    pub fn embed(&self, text: &str) -> Embedding {
        let c = clean(text);
        let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
        for t in c.tokens() {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        let mut values = vec![0.0; self.cfg.dim];
        for (t, count) in tf {
            let (i, sign) = self.bucket(t);
            values[i] += sign * count * self.idf.get(t);
        }
        let norm = dot(&values, &values).sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Embedding { values }
    }
}

impl EmbeddingBackend for BaselineEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Service root; requests go to `<base_url>/embed`.
    pub base_url: String,
    pub dim: usize,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://127.0.0.1:8080".to_string(),
            dim: 768,
            batch_size: 64,
            max_in_flight: 4,
            max_retries: 3,
            initial_backoff_ms: 100,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    #[serde(default)]
    dim: Option<usize>,
}

/// Client for `POST <base>/embed` with `{"texts": [...]}` →
/// `{"vectors": [[...], ...], "dim": D}`.
pub struct RemoteEmbedder {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Retry(String),
    Fatal(EmbedError),
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteConfig) -> Result<Self, EmbedError> {
        if cfg.batch_size == 0 || cfg.dim == 0 {
            return Err(EmbedError::Protocol(
                "batch_size and dim must be positive".to_string(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| EmbedError::Protocol(e.to_string()))?;
        Ok(RemoteEmbedder { cfg, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/embed", self.cfg.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, texts: &[String]) -> Result<Vec<Embedding>, Attempt> {
        let resp = self
            .client
            .post(self.endpoint())
            .json(&EmbedRequest { texts })
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(EmbedError::Protocol(format!("HTTP {status}"))));
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| Attempt::Fatal(EmbedError::Protocol(e.to_string())))?;
        self.validate(texts.len(), body).map_err(Attempt::Fatal)
    }

    fn validate(&self, expected: usize, body: EmbedResponse) -> Result<Vec<Embedding>, EmbedError> {
        if body.vectors.len() != expected {
            return Err(EmbedError::Protocol(format!(
                "expected {expected} vectors, got {}",
                body.vectors.len()
            )));
        }
        if let Some(d) = body.dim {
            if d != self.cfg.dim {
                return Err(EmbedError::DimMismatch {
                    expected: self.cfg.dim,
                    got: d,
                });
            }
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.cfg.dim {
                    return Err(EmbedError::DimMismatch {
                        expected: self.cfg.dim,
                        got: v.len(),
                    });
                }
                Embedding::new(v)
            })
            .collect()
    }

    fn embed_chunk(&self, start: usize, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let mut backoff = Duration::from_millis(self.cfg.initial_backoff_ms);
        let mut attempts = 0;
        loop {
            match self.attempt(texts) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(message)) => {
                    if attempts >= self.cfg.max_retries {
                        return Err(EmbedError::Transport {
                            start,
                            end: start + texts.len(),
                            message,
                        });
                    }
                    log::warn!("embedding batch {start}..{}: {message}; retrying", start + texts.len());
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempts += 1;
                }
            }
        }
    }
}

impl EmbeddingBackend for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Chunks are sent concurrently (bounded by `max_in_flight`) and
    /// reassembled by chunk index.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        use rayon::prelude::*;
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: Vec<(usize, &[String])> = texts
            .chunks(self.cfg.batch_size)
            .enumerate()
            .map(|(i, c)| (i * self.cfg.batch_size, c))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.max_in_flight.max(1))
            .build()
            .map_err(|e| EmbedError::Protocol(e.to_string()))?;
        let results: Vec<Result<Vec<Embedding>, EmbedError>> = pool.install(|| {
            chunks
                .par_iter()
                .map(|(start, chunk)| self.embed_chunk(*start, chunk))
                .collect()
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Embeds texts in fixed-size chunks so large corpora do not need a single request.
pub fn embed_all(
    backend: &dyn EmbeddingBackend,
    texts: &[String],
    chunk: usize,
) -> Result<Vec<Embedding>, EmbedError> {
    let mut out = Vec::with_capacity(texts.len());
    for c in texts.chunks(chunk.max(1)) {
        let vecs = backend.embed_batch(c)?;
        if vecs.len() != c.len() {
            return Err(EmbedError::Protocol(format!(
                "backend returned {} vectors for {} texts",
                vecs.len(),
                c.len()
            )));
        }
        out.extend(vecs);
    }
    Ok(out)
}

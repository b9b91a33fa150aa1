//! Ranked label predictions and the two shared-task metrics.
//!
//! For gold labels `yᵢ` and ranked lists `ŷᵢ` over `n` instances:
//!
//! * `Accuracy = (1/n) Σᵢ 1[yᵢ = ŷᵢ[1]]`
//! * `Mean Rank = (1/n) Σᵢ position of yᵢ in ŷᵢ`, counting from 1.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabelCatalog, LabelId, NUM_LABELS};
use crate::embed::{cosine, embed_all, EmbedError, Embedding, EmbeddingBackend};
use crate::jsonl::{self, JsonlError};
use crate::simtrain::{ProjectionHead, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum RankError {
    #[error("term {0:?} has no occurrences")]
    NoOccurrences(String),
    #[error("every occurrence of {0:?} embeds to a zero vector")]
    AllOccurrencesSkipped(String),
    #[error("label catalog has no definition for {0}")]
    MissingDefinition(LabelId),
    #[error("definition of {0} embeds to a zero vector")]
    ZeroDefinition(LabelId),
    #[error("invalid prediction for {term:?}: {message}")]
    InvalidPrediction { term: String, message: String },
    #[error("{gold} gold instances but {preds} predictions")]
    LengthMismatch { gold: usize, preds: usize },
    #[error("instance {index}: gold term {gold:?} but prediction for {pred:?}")]
    TermMismatch {
        index: usize,
        gold: String,
        pred: String,
    },
    #[error("nothing to evaluate")]
    Empty,
    #[error("record {0:?} has no label")]
    Unlabeled(String),
    #[error("classifier needs at least two distinct labels, found {0}")]
    SingleClass(usize),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// All 17 labels for one term, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub term: String,
    pub ranked_labels: Vec<LabelId>,
    pub scores: Vec<f64>,
}

impl RankedPrediction {
    /// Sorts per-label scores (canonical label order) descending; equal
    /// scores keep the lower label index first.
    pub fn from_scores(term: &str, scores: &[f64]) -> Result<Self, RankError> {
        if scores.len() != NUM_LABELS || scores.iter().any(|s| !s.is_finite()) {
            return Err(RankError::InvalidPrediction {
                term: term.to_string(),
                message: format!("expected {NUM_LABELS} finite scores, got {scores:?}"),
            });
        }
        let mut order: Vec<usize> = (0..NUM_LABELS).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(RankedPrediction {
            term: term.to_string(),
            ranked_labels: order.iter().map(|&i| LabelId::new(i).unwrap()).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        })
    }

    pub fn validate(&self) -> Result<(), RankError> {
        let bad = |message: String| RankError::InvalidPrediction {
            term: self.term.clone(),
            message,
        };
        if self.ranked_labels.len() != NUM_LABELS || self.scores.len() != NUM_LABELS {
            return Err(bad(format!(
                "{} labels and {} scores, expected {NUM_LABELS} of each",
                self.ranked_labels.len(),
                self.scores.len()
            )));
        }
        let mut seen = [false; NUM_LABELS];
        for l in &self.ranked_labels {
            if std::mem::replace(&mut seen[l.index()], true) {
                return Err(bad(format!("label {l} listed twice")));
            }
        }
        if self.scores.windows(2).any(|w| !(w[0] >= w[1])) {
            return Err(bad("scores are not non-increasing".into()));
        }
        Ok(())
    }

    /// 1-based position of `label`.
    pub fn position(&self, label: LabelId) -> Option<usize> {
        self.ranked_labels.iter().position(|&l| l == label).map(|p| p + 1)
    }

    pub fn top(&self) -> LabelId {
        self.ranked_labels[0]
    }
}

fn mean_scores(term: &str, rows: &[Vec<f64>]) -> Result<RankedPrediction, RankError> {
    if rows.is_empty() {
        return Err(RankError::AllOccurrencesSkipped(term.to_string()));
    }
    let mut mean = vec![0.0; NUM_LABELS];
    for row in rows {
        for (m, s) in mean.iter_mut().zip(row) {
            *m += s;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    RankedPrediction::from_scores(term, &mean)
}

/// Ranks labels by cosine similarity between term surfaces and label
/// definitions, optionally through a trained projection head.
pub struct SimilarityRanker<'a> {
    backend: &'a dyn EmbeddingBackend,
    head: Option<&'a ProjectionHead>,
    labels: Vec<Embedding>,
}

impl<'a> SimilarityRanker<'a> {
    pub fn new(
        catalog: &LabelCatalog,
        backend: &'a dyn EmbeddingBackend,
        head: Option<&'a ProjectionHead>,
    ) -> Result<Self, RankError> {
        let defs = LabelId::all()
            .map(|l| {
                catalog
                    .definition(l)
                    .map(str::to_string)
                    .ok_or(RankError::MissingDefinition(l))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let raw = backend.embed_batch(&defs)?;
        let mut labels = Vec::with_capacity(NUM_LABELS);
        for (l, v) in LabelId::all().zip(raw) {
            if v.is_zero() {
                return Err(RankError::ZeroDefinition(l));
            }
            labels.push(match head {
                Some(h) => h.project(&v)?,
                None => v,
            });
        }
        Ok(SimilarityRanker {
            backend,
            head,
            labels,
        })
    }

    fn prepare(&self, v: &Embedding) -> Result<Option<Embedding>, RankError> {
        if v.is_zero() {
            return Ok(None);
        }
        match self.head {
            Some(h) => match h.project(v) {
                Ok(p) => Ok(Some(p)),
                Err(TrainError::ZeroProjection) => Ok(None),
                Err(e) => Err(e.into()),
            },
            None => Ok(Some(v.clone())),
        }
    }

    /// Averages per-label cosine over already embedded occurrences.
    pub fn rank_embedded(&self, term: &str, occurrences: &[&Embedding]) -> Result<RankedPrediction, RankError> {
        if occurrences.is_empty() {
            return Err(RankError::NoOccurrences(term.to_string()));
        }
        let mut rows = Vec::with_capacity(occurrences.len());
        for (i, v) in occurrences.iter().enumerate() {
            let Some(v) = self.prepare(v)? else {
                log::warn!("skipping occurrence {i} of {term:?}: zero vector");
                continue;
            };
            rows.push(
                self.labels
                    .iter()
                    .map(|l| cosine(&v, l))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
        mean_scores(term, &rows)
    }

    pub fn rank_term(&self, term: &str, occurrences: &[&str]) -> Result<RankedPrediction, RankError> {
        if occurrences.is_empty() {
            return Err(RankError::NoOccurrences(term.to_string()));
        }
        let texts: Vec<String> = occurrences.iter().map(|s| s.to_string()).collect();
        let vecs = self.backend.embed_batch(&texts)?;
        self.rank_embedded(term, &vecs.iter().collect::<Vec<_>>())
    }

    /// Ranks many terms, embedding every distinct surface once.
    pub fn rank_all(&self, terms: &[(&str, Vec<&str>)]) -> Result<Vec<RankedPrediction>, RankError> {
        let cache = embed_surfaces(self.backend, terms)?;
        terms
            .par_iter()
            .map(|(term, occ)| {
                let vecs: Vec<&Embedding> = occ.iter().map(|s| &cache[*s]).collect();
                self.rank_embedded(term, &vecs)
            })
            .collect()
    }
}

fn embed_surfaces<'t>(
    backend: &dyn EmbeddingBackend,
    terms: &[(&'t str, Vec<&'t str>)],
) -> Result<HashMap<&'t str, Embedding>, RankError> {
    let mut unique: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (_, occ) in terms {
        for s in occ {
            if seen.insert(*s) {
                unique.push(s);
            }
        }
    }
    let owned: Vec<String> = unique.iter().map(|s| s.to_string()).collect();
    let vecs = embed_all(backend, &owned, 256)?;
    Ok(unique.into_iter().zip(vecs).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            learning_rate: 1.0,
            epochs: 200,
            l2: 0.0,
            seed: 42,
        }
    }
}

/// Multinomial logistic regression over backend vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    pub dim: usize,
    /// Row-major `17 × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    logits.iter_mut().for_each(|l| *l /= sum);
}

impl SoftmaxClassifier {
    fn probs_sparse(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let mut logits: Vec<f64> = (0..NUM_LABELS)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + x.iter().map(|&(i, v)| row[i] * v).sum::<f64>()
            })
            .collect();
        softmax(&mut logits);
        logits
    }

    /// Class probabilities in canonical label order.
    pub fn probabilities(&self, v: &Embedding) -> Result<Vec<f64>, RankError> {
        if v.dim() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                got: v.dim(),
            }
            .into());
        }
        Ok(self.probs_sparse(&v.nonzeros()))
    }
}

/// Full-batch gradient descent on mean cross-entropy.
pub fn train_softmax_classifier(
    train: &Dataset,
    backend: &dyn EmbeddingBackend,
    cfg: &ClassifierConfig,
) -> Result<SoftmaxClassifier, RankError> {
    let mut texts = Vec::with_capacity(train.len());
    let mut targets = Vec::with_capacity(train.len());
    for r in &train.records {
        let label = r.label.ok_or_else(|| RankError::Unlabeled(r.term.clone()))?;
        texts.push(r.surface.clone());
        targets.push(label.index());
    }
    let distinct = targets.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(RankError::SingleClass(distinct));
    }
    let inputs: Vec<Vec<(usize, f64)>> = embed_all(backend, &texts, 256)?
        .iter()
        .map(Embedding::nonzeros)
        .collect();

    let dim = backend.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let mut model = SoftmaxClassifier {
        dim,
        weights: (0..NUM_LABELS * dim).map(|_| normal.sample(&mut rng)).collect(),
        bias: vec![0.0; NUM_LABELS],
    };
    let n = inputs.len() as f64;
    for _ in 0..cfg.epochs {
        let mut grad_w = vec![0.0; NUM_LABELS * dim];
        let mut grad_b = vec![0.0; NUM_LABELS];
        for (x, &y) in inputs.iter().zip(&targets) {
            let mut p = model.probs_sparse(x);
            p[y] -= 1.0;
            for (c, pc) in p.iter().enumerate() {
                grad_b[c] += pc / n;
                let row = &mut grad_w[c * dim..(c + 1) * dim];
                for &(i, v) in x {
                    row[i] += pc * v / n;
                }
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&grad_w) {
            *w -= cfg.learning_rate * (g + cfg.l2 * *w);
        }
        for (b, g) in model.bias.iter_mut().zip(&grad_b) {
            *b -= cfg.learning_rate * g;
        }
    }
    Ok(model)
}

/// Averages class probabilities over the non-zero occurrences of a term.
pub fn classify_embedded(
    term: &str,
    occurrences: &[&Embedding],
    classifier: &SoftmaxClassifier,
) -> Result<RankedPrediction, RankError> {
    if occurrences.is_empty() {
        return Err(RankError::NoOccurrences(term.to_string()));
    }
    let mut rows = Vec::new();
    for (i, v) in occurrences.iter().enumerate() {
        if v.is_zero() {
            log::warn!("skipping occurrence {i} of {term:?}: zero vector");
            continue;
        }
        rows.push(classifier.probabilities(v)?);
    }
    mean_scores(term, &rows)
}

pub fn classify_term(
    term: &str,
    occurrences: &[&str],
    classifier: &SoftmaxClassifier,
    backend: &dyn EmbeddingBackend,
) -> Result<RankedPrediction, RankError> {
    if occurrences.is_empty() {
        return Err(RankError::NoOccurrences(term.to_string()));
    }
    let texts: Vec<String> = occurrences.iter().map(|s| s.to_string()).collect();
    let vecs = backend.embed_batch(&texts)?;
    classify_embedded(term, &vecs.iter().collect::<Vec<_>>(), classifier)
}

pub fn classify_all(
    terms: &[(&str, Vec<&str>)],
    classifier: &SoftmaxClassifier,
    backend: &dyn EmbeddingBackend,
) -> Result<Vec<RankedPrediction>, RankError> {
    let cache = embed_surfaces(backend, terms)?;
    terms
        .par_iter()
        .map(|(term, occ)| {
            let vecs: Vec<&Embedding> = occ.iter().map(|s| &cache[*s]).collect();
            classify_embedded(term, &vecs, classifier)
        })
        .collect()
}

fn gold_positions(gold: &[(String, LabelId)], preds: &[RankedPrediction]) -> Result<Vec<usize>, RankError> {
    if gold.len() != preds.len() {
        return Err(RankError::LengthMismatch {
            gold: gold.len(),
            preds: preds.len(),
        });
    }
    if gold.is_empty() {
        return Err(RankError::Empty);
    }
    gold.iter()
        .zip(preds)
        .enumerate()
        .map(|(index, ((term, label), pred))| {
            if term != &pred.term {
                return Err(RankError::TermMismatch {
                    index,
                    gold: term.clone(),
                    pred: pred.term.clone(),
                });
            }
            pred.validate()?;
            Ok(pred.position(*label).expect("validated prediction lists every label"))
        })
        .collect()
}

pub fn accuracy(gold: &[(String, LabelId)], preds: &[RankedPrediction]) -> Result<f64, RankError> {
    let pos = gold_positions(gold, preds)?;
    Ok(pos.iter().filter(|&&p| p == 1).count() as f64 / pos.len() as f64)
}

pub fn mean_rank(gold: &[(String, LabelId)], preds: &[RankedPrediction]) -> Result<f64, RankError> {
    let pos = gold_positions(gold, preds)?;
    Ok(pos.iter().sum::<usize>() as f64 / pos.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_rank: f64,
    pub n: usize,
}

pub fn evaluate(gold: &[(String, LabelId)], preds: &[RankedPrediction]) -> Result<EvalReport, RankError> {
    Ok(EvalReport {
        accuracy: accuracy(gold, preds)?,
        mean_rank: mean_rank(gold, preds)?,
        n: gold.len(),
    })
}

pub fn load_predictions(path: &Path) -> Result<Vec<RankedPrediction>, RankError> {
    let rows: Vec<(usize, RankedPrediction)> = jsonl::read(path)?;
    rows.into_iter()
        .map(|(_, p)| p.validate().map(|_| p))
        .collect()
}

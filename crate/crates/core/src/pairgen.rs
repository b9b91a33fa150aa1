//! Graded similarity pairs for training.
//!
//! Every labeled surface `T` is paired with its own label definition at score
//! 1.0 and with the definitions of the labels of `negatives_per_positive`
//! randomly drawn records carrying a different label, scored from the
//! taxonomy. Score-0 pairs are then under-sampled to a target share.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabelCatalog, LabelId};
use crate::jsonl::{self, JsonlError};
use crate::taxonomy::{check_k, Taxonomy, TaxonomyError};

#[derive(Debug, thiserror::Error)]
pub enum PairGenError {
    #[error("record {0} has no label")]
    Unlabeled(usize),
    #[error("catalog has no definition for {0:?}")]
    MissingDefinition(String),
    #[error("no record with a label other than {0:?} to sample negatives from")]
    NoNegatives(String),
    #[error("no non-zero pair to balance zero pairs against")]
    NoNonZeroPairs,
    #[error("negatives_per_positive must be at least 1")]
    NoNegativesRequested,
    #[error("target zero fraction must lie strictly between 0 and 1, got {0}")]
    BadZeroFraction(f64),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub anchor: String,
    pub other: String,
    pub score: f64,
    pub anchor_label: LabelId,
    pub other_label: LabelId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGenConfig {
    pub k: f64,
    pub negatives_per_positive: usize,
    pub target_zero_fraction: f64,
    pub seed: u64,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        PairGenConfig {
            k: 0.4,
            negatives_per_positive: 10,
            target_zero_fraction: 0.30,
            seed: 42,
        }
    }
}

impl PairGenConfig {
    pub fn validate(&self) -> Result<(), PairGenError> {
        check_k(self.k)?;
        if self.negatives_per_positive == 0 {
            return Err(PairGenError::NoNegativesRequested);
        }
        if !(self.target_zero_fraction > 0.0 && self.target_zero_fraction < 1.0) {
            return Err(PairGenError::BadZeroFraction(self.target_zero_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Generated {
    pub pairs: Vec<ScoredPair>,
    /// Anchors whose negatives had to be drawn with replacement.
    pub warnings: Vec<String>,
}

/// RNG for one anchor: the master seed selects the key, the anchor index the stream,
/// so results do not depend on the order anchors are processed in.
fn anchor_rng(seed: u64, anchor: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(anchor as u64);
    rng
}

pub fn generate(
    train: &Dataset,
    catalog: &LabelCatalog,
    taxonomy: &Taxonomy,
    cfg: &PairGenConfig,
) -> Result<Generated, PairGenError> {
    cfg.validate()?;
    let labels: Vec<LabelId> = train
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| r.label.ok_or(PairGenError::Unlabeled(i)))
        .collect::<Result<_, _>>()?;
    let definition = |l: LabelId| {
        catalog
            .definition(l)
            .ok_or_else(|| PairGenError::MissingDefinition(l.name().to_string()))
    };

    let mut out = Generated::default();
    for (i, record) in train.records.iter().enumerate() {
        let label = labels[i];
        out.pairs.push(ScoredPair {
            anchor: record.surface.clone(),
            other: definition(label)?.to_string(),
            score: 1.0,
            anchor_label: label,
            other_label: label,
        });

        let pool: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != label).collect();
        if pool.is_empty() {
            return Err(PairGenError::NoNegatives(label.name().to_string()));
        }
        let mut rng = anchor_rng(cfg.seed, i);
        let draws: Vec<usize> = if pool.len() >= cfg.negatives_per_positive {
            index::sample(&mut rng, pool.len(), cfg.negatives_per_positive)
                .into_iter()
                .map(|j| pool[j])
                .collect()
        } else {
            let msg = format!(
                "record {i}: only {} candidate negative(s) for {} requested; sampling with replacement",
                pool.len(),
                cfg.negatives_per_positive
            );
            log::warn!("{msg}");
            out.warnings.push(msg);
            (0..cfg.negatives_per_positive)
                .map(|_| pool[rng.gen_range(0..pool.len())])
                .collect()
        };
        for j in draws {
            let other = labels[j];
            out.pairs.push(ScoredPair {
                anchor: record.surface.clone(),
                other: definition(other)?.to_string(),
                score: taxonomy.pair_score(label, other, cfg.k)?,
                anchor_label: label,
                other_label: other,
            });
        }
    }
    Ok(out)
}

/// Number of zero pairs that makes them a `fraction` share next to `nonzero` others.
pub fn zero_target(nonzero: usize, fraction: f64) -> usize {
    (fraction / (1.0 - fraction) * nonzero as f64).round() as usize
}

/// Keeps every non-zero pair plus a seeded random subset of zero pairs, then
/// shuffles the result.
pub fn undersample_zeros(
    pairs: &[ScoredPair],
    target_zero_fraction: f64,
    seed: u64,
) -> Result<Vec<ScoredPair>, PairGenError> {
    if !(target_zero_fraction > 0.0 && target_zero_fraction < 1.0) {
        return Err(PairGenError::BadZeroFraction(target_zero_fraction));
    }
    let (zeros, mut kept): (Vec<&ScoredPair>, Vec<&ScoredPair>) =
        pairs.iter().partition(|p| p.score == 0.0);
    if kept.is_empty() {
        return Err(PairGenError::NoNonZeroPairs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want = zero_target(kept.len(), target_zero_fraction).min(zeros.len());
    let mut chosen = index::sample(&mut rng, zeros.len(), want).into_vec();
    chosen.sort_unstable();
    kept.extend(chosen.into_iter().map(|j| zeros[j]));
    kept.shuffle(&mut rng);
    Ok(kept.into_iter().cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketStat {
    pub score: f64,
    pub count: usize,
    pub fraction: f64,
}

/// Exact counts per distinct score, highest score first.
pub fn distribution_report(pairs: &[ScoredPair]) -> Vec<BucketStat> {
    let mut buckets: Vec<BucketStat> = Vec::new();
    for p in pairs {
        match buckets.iter_mut().find(|b| b.score == p.score) {
            Some(b) => b.count += 1,
            None => buckets.push(BucketStat {
                score: p.score,
                count: 1,
                fraction: 0.0,
            }),
        }
    }
    let n = pairs.len() as f64;
    for b in &mut buckets {
        b.fraction = b.count as f64 / n;
    }
    buckets.sort_by(|a, b| b.score.total_cmp(&a.score));
    buckets
}

pub fn load_pairs(path: &Path) -> Result<Vec<ScoredPair>, PairGenError> {
    Ok(jsonl::read(path)?.into_iter().map(|(_, p)| p).collect())
}

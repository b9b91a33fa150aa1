//! Training a linear projection head over frozen sentence vectors.
//!
//! Two objectives are minimized jointly with plain mini-batch gradient descent:
//!
//! * multiple negatives ranking loss over the score-1.0 pairs, where the
//!   positives of the other anchors in a batch act as negatives:
//!   `L = -(1/B) Σᵢ log softmax_j(scale · cos(aᵢ, pⱼ))[i]`
//! * (online) contrastive loss over all pairs, binarized by a score
//!   threshold, with cosine distance `d = 1 - cos(u, v)`:
//!   `label · d² + (1 - label) · max(0, margin - d)²`
//!
//! Both losses are written in terms of the cosine of raw (un-normalized)
//! projected vectors, so their gradients are exact for any non-zero input
//! and can be checked against central finite differences with [`grad_check`].

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embed::{dot, embed_all, EmbedError, Embedding, EmbeddingBackend};
use crate::pairgen::ScoredPair;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no training pairs")]
    NoPairs,
    #[error("input has dimension {got}, head expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("projection of a zero vector cannot be normalized")]
    ZeroProjection,
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{0}")]
    Io(String),
}

/// Row-major `out_dim × in_dim` linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    out_dim: usize,
    in_dim: usize,
    weights: Vec<f64>,
}

const HEAD_MAGIC: &[u8; 8] = b"HRHEAD01";

impl ProjectionHead {
    pub fn new(out_dim: usize, in_dim: usize, weights: Vec<f64>) -> Result<Self, TrainError> {
        if out_dim == 0 || in_dim == 0 || out_dim > in_dim {
            return Err(TrainError::Config(format!(
                "head must satisfy 0 < out_dim <= in_dim, got {out_dim}x{in_dim}"
            )));
        }
        if weights.len() != out_dim * in_dim {
            return Err(TrainError::Config(format!(
                "expected {} weights, got {}",
                out_dim * in_dim,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(TrainError::Config("head weights must be finite".into()));
        }
        Ok(ProjectionHead {
            out_dim,
            in_dim,
            weights,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        ProjectionHead {
            out_dim: dim,
            in_dim: dim,
            weights,
        }
    }

    /// Square heads start at identity plus `N(0, noise²)`; narrower heads
    /// start as a Gaussian random projection with variance `1/out_dim`.
    pub fn init(in_dim: usize, out_dim: usize, noise: f64, seed: u64) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = if out_dim == in_dim {
            ProjectionHead::identity(in_dim)
        } else {
            ProjectionHead::new(out_dim, in_dim, vec![0.0; out_dim * in_dim])?
        };
        let std = if out_dim == in_dim {
            noise
        } else {
            1.0 / (out_dim as f64).sqrt()
        };
        if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| TrainError::Config(e.to_string()))?;
            for w in &mut head.weights {
                *w += normal.sample(&mut rng);
            }
        }
        Ok(head)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn apply_sparse(&self, x: &[(usize, f64)]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                x.iter().map(|&(i, v)| row[i] * v).sum()
            })
            .collect()
    }

    /// `W·v`, L2-normalized.
    pub fn project(&self, v: &Embedding) -> Result<Embedding, TrainError> {
        if v.dim() != self.in_dim {
            return Err(TrainError::DimMismatch {
                expected: self.in_dim,
                got: v.dim(),
            });
        }
        let z = self.apply_sparse(&v.nonzeros());
        let norm = dot(&z, &z).sqrt();
        if norm == 0.0 {
            return Err(TrainError::ZeroProjection);
        }
        Ok(Embedding::new(z.into_iter().map(|x| x / norm).collect())?)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(HEAD_MAGIC)?;
        w.write_all(&(self.out_dim as u64).to_le_bytes())?;
        w.write_all(&(self.in_dim as u64).to_le_bytes())?;
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TrainError> {
        let io = |e: std::io::Error| TrainError::Io(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != HEAD_MAGIC {
            return Err(TrainError::Io("not a projection head file".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word).map_err(io)?;
        let out_dim = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(io)?;
        let in_dim = u64::from_le_bytes(word) as usize;
        let n = out_dim
            .checked_mul(in_dim)
            .ok_or_else(|| TrainError::Io("head dimensions overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io)?;
        if bytes.len() != n * 8 {
            return Err(TrainError::Io(format!(
                "head file holds {} bytes of weights, expected {}",
                bytes.len(),
                n * 8
            )));
        }
        let weights = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ProjectionHead::new(out_dim, in_dim, weights)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let f = std::fs::File::open(path)
            .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Cosine and its gradients with respect to both arguments.
fn cosine_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    let c = dot(u, v) / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| vi / (nu * nv) - c * ui / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| ui / (nu * nv) - c * vi / (nv * nv))
        .collect();
    (c, du, dv)
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnrOutput {
    pub loss: f64,
    pub anchor_grads: Vec<Vec<f64>>,
    pub positive_grads: Vec<Vec<f64>>,
}

/// Multiple negatives ranking loss over `(anchor, positive)` rows.
pub fn mnr_loss(anchors: &[Vec<f64>], positives: &[Vec<f64>], scale: f64) -> MnrOutput {
    assert_eq!(anchors.len(), positives.len(), "one positive per anchor");
    let b = anchors.len();
    let dim = |v: &[Vec<f64>]| v.first().map_or(0, Vec::len);
    let mut anchor_grads = vec![vec![0.0; dim(anchors)]; b];
    let mut positive_grads = vec![vec![0.0; dim(positives)]; b];
    if b == 0 {
        return MnrOutput {
            loss: 0.0,
            anchor_grads,
            positive_grads,
        };
    }
    let mut loss = 0.0;
    for i in 0..b {
        let row: Vec<(f64, Vec<f64>, Vec<f64>)> =
            (0..b).map(|j| cosine_grad(&anchors[i], &positives[j])).collect();
        let logits: Vec<f64> = row.iter().map(|(c, _, _)| scale * c).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[i];
        for (j, (_, du, dv)) in row.iter().enumerate() {
            let p = (logits[j] - lse).exp();
            let d_logit = (p - if i == j { 1.0 } else { 0.0 }) / b as f64;
            axpy(&mut anchor_grads[i], d_logit * scale, du);
            axpy(&mut positive_grads[j], d_logit * scale, dv);
        }
    }
    MnrOutput {
        loss: loss / b as f64,
        anchor_grads,
        positive_grads,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub left_grads: Vec<Vec<f64>>,
    pub right_grads: Vec<Vec<f64>>,
    /// Number of pairs that entered the mean.
    pub contributing: usize,
}

/// Contrastive loss on cosine distance, averaged over contributing pairs.
///
/// With `online` set, only hard pairs contribute: positives farther apart
/// than the closest negative and negatives closer than the farthest
/// positive. A batch holding a single class keeps all of its pairs.
pub fn contrastive_loss(
    left: &[Vec<f64>],
    right: &[Vec<f64>],
    labels: &[bool],
    margin: f64,
    online: bool,
) -> ContrastiveOutput {
    assert!(left.len() == right.len() && left.len() == labels.len());
    let n = left.len();
    let grads: Vec<(f64, Vec<f64>, Vec<f64>)> =
        (0..n).map(|i| cosine_grad(&left[i], &right[i])).collect();
    let dist: Vec<f64> = grads.iter().map(|(c, _, _)| 1.0 - c).collect();

    let has_pos = labels.iter().any(|&l| l);
    let has_neg = labels.iter().any(|&l| !l);
    let include: Vec<bool> = if online && has_pos && has_neg {
        let min_neg = (0..n)
            .filter(|&i| !labels[i])
            .map(|i| dist[i])
            .fold(f64::INFINITY, f64::min);
        let max_pos = (0..n)
            .filter(|&i| labels[i])
            .map(|i| dist[i])
            .fold(f64::NEG_INFINITY, f64::max);
        (0..n)
            .map(|i| {
                if labels[i] {
                    dist[i] > min_neg
                } else {
                    dist[i] < max_pos
                }
            })
            .collect()
    } else {
        vec![true; n]
    };

    let contributing = include.iter().filter(|&&b| b).count();
    let dim = |v: &[Vec<f64>]| v.first().map_or(0, Vec::len);
    let mut left_grads = vec![vec![0.0; dim(left)]; n];
    let mut right_grads = vec![vec![0.0; dim(right)]; n];
    if contributing == 0 {
        return ContrastiveOutput {
            loss: 0.0,
            left_grads,
            right_grads,
            contributing,
        };
    }
    let scale = 1.0 / contributing as f64;
    let mut loss = 0.0;
    for i in (0..n).filter(|&i| include[i]) {
        let d = dist[i];
        // dL/dcos for each branch, since d = 1 - cos.
        let (l, d_cos) = if labels[i] {
            (d * d, -2.0 * d)
        } else {
            let gap = (margin - d).max(0.0);
            (gap * gap, 2.0 * gap)
        };
        loss += l;
        if d_cos != 0.0 {
            let (_, du, dv) = &grads[i];
            axpy(&mut left_grads[i], d_cos * scale, du);
            axpy(&mut right_grads[i], d_cos * scale, dv);
        }
    }
    ContrastiveOutput {
        loss: loss * scale,
        left_grads,
        right_grads,
        contributing,
    }
}

/// Maximum relative error between an analytic gradient and central finite
/// differences: `|g_a - g_f| / max(1e-8, |g_a| + |g_f|)`.
///
/// `coords` limits the check to a seeded random subset of that many
/// coordinates (at least 100, or all when the point is smaller).
pub fn grad_check<F>(f: F, point: &[f64], epsilon: f64, coords: Option<(usize, u64)>) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert!(
        (1e-7..=1e-3).contains(&epsilon),
        "epsilon must lie in [1e-7, 1e-3]"
    );
    let (_, analytic) = f(point);
    let selected: Vec<usize> = match coords {
        Some((count, seed)) if count.max(100) < point.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            index::sample(&mut rng, point.len(), count.max(100)).into_vec()
        }
        _ => (0..point.len()).collect(),
    };
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in selected {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (fp, _) = f(&x);
        x[i] = orig - epsilon;
        let (fm, _) = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryPair {
    pub anchor: String,
    pub other: String,
    pub label: bool,
}

/// Label 1 iff `score >= threshold`.
pub fn binarize(pairs: &[ScoredPair], threshold: f64) -> Vec<BinaryPair> {
    pairs
        .iter()
        .map(|p| BinaryPair {
            anchor: p.anchor.clone(),
            other: p.other.clone(),
            label: p.score >= threshold,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub mnrl_scale: f64,
    pub binary_threshold: f64,
    /// Restrict the contrastive loss to hard pairs.
    pub online: bool,
    /// Output width of the head; `None` keeps it square for inputs up to
    /// 1024 dimensions and uses 256 above that.
    pub head_dim: Option<usize>,
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            epochs: 25,
            batch_size: 20,
            margin: 0.5,
            mnrl_scale: 20.0,
            binary_threshold: 0.5,
            online: true,
            head_dim: None,
            init_noise: 1e-3,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.margin > 0.0 && self.margin <= 2.0) {
            return Err(TrainError::Config(format!("margin must lie in (0, 2], got {}", self.margin)));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim_for(&self, in_dim: usize) -> usize {
        self.head_dim
            .unwrap_or(if in_dim <= 1024 { in_dim } else { 256 })
            .min(in_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mnrl: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub head: ProjectionHead,
    pub trace: Vec<EpochLoss>,
}

pub fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,mnrl,contrastive,total\n");
    for e in trace {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.mnrl, e.contrastive, e.total));
    }
    out
}

type Sparse = Vec<(usize, f64)>;

struct StepOutput {
    mnrl: Option<f64>,
    contrastive: Option<f64>,
    /// Loss gradient with respect to each projected text, sorted by text index.
    grads: Vec<(usize, Vec<f64>)>,
}

fn step_objective(
    head: &ProjectionHead,
    inputs: &[Sparse],
    mnr: Option<&[(usize, usize)]>,
    con: Option<&[(usize, usize, bool)]>,
    cfg: &TrainConfig,
) -> StepOutput {
    let mut projected: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut z = |i: usize| {
        projected
            .entry(i)
            .or_insert_with(|| head.apply_sparse(&inputs[i]))
            .clone()
    };
    let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut add = |i: usize, g: &[f64]| {
        axpy(grads.entry(i).or_insert_with(|| vec![0.0; g.len()]), 1.0, g);
    };

    let mnrl = mnr.map(|batch| {
        let a: Vec<Vec<f64>> = batch.iter().map(|&(i, _)| z(i)).collect();
        let p: Vec<Vec<f64>> = batch.iter().map(|&(_, j)| z(j)).collect();
        let out = mnr_loss(&a, &p, cfg.mnrl_scale);
        for (k, &(i, j)) in batch.iter().enumerate() {
            add(i, &out.anchor_grads[k]);
            add(j, &out.positive_grads[k]);
        }
        out.loss
    });
    let contrastive = con.map(|batch| {
        let u: Vec<Vec<f64>> = batch.iter().map(|&(i, _, _)| z(i)).collect();
        let v: Vec<Vec<f64>> = batch.iter().map(|&(_, j, _)| z(j)).collect();
        let labels: Vec<bool> = batch.iter().map(|&(_, _, l)| l).collect();
        let out = contrastive_loss(&u, &v, &labels, cfg.margin, cfg.online);
        for (k, &(i, j, _)) in batch.iter().enumerate() {
            add(i, &out.left_grads[k]);
            add(j, &out.right_grads[k]);
        }
        out.loss
    });

    let mut grads: Vec<(usize, Vec<f64>)> = grads.into_iter().collect();
    grads.sort_by_key(|(i, _)| *i);
    StepOutput {
        mnrl,
        contrastive,
        grads,
    }
}

/// `W -= lr · Σ g xᵀ` over the texts touched by a step.
fn apply_step(head: &mut ProjectionHead, inputs: &[Sparse], grads: &[(usize, Vec<f64>)], lr: f64) {
    let in_dim = head.in_dim;
    for (idx, g) in grads {
        for (o, go) in g.iter().enumerate() {
            if *go == 0.0 {
                continue;
            }
            let row = &mut head.weights[o * in_dim..(o + 1) * in_dim];
            for &(i, x) in &inputs[*idx] {
                row[i] -= lr * go * x;
            }
        }
    }
}

pub fn train(
    pairs: &[ScoredPair],
    backend: &dyn EmbeddingBackend,
    cfg: &TrainConfig,
) -> Result<Trained, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::NoPairs);
    }

    let mut text_index: HashMap<&str, usize> = HashMap::new();
    let mut texts: Vec<String> = Vec::new();
    let mut pair_ids: Vec<(usize, usize)> = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut ends = [0usize; 2];
        for (slot, t) in ends.iter_mut().zip([p.anchor.as_str(), p.other.as_str()]) {
            *slot = *text_index.entry(t).or_insert_with(|| {
                texts.push(t.to_string());
                texts.len() - 1
            });
        }
        pair_ids.push((ends[0], ends[1]));
    }

    let inputs: Vec<Sparse> = embed_all(backend, &texts, 256)?
        .iter()
        .map(Embedding::nonzeros)
        .collect();
    let in_dim = backend.dim();
    let mut head = ProjectionHead::init(in_dim, cfg.head_dim_for(in_dim), cfg.init_noise, cfg.seed)?;

    let usable = |&(a, o): &(usize, usize)| !inputs[a].is_empty() && !inputs[o].is_empty();
    let skipped = pair_ids.iter().filter(|p| !usable(p)).count();
    if skipped > 0 {
        log::warn!("skipping {skipped} pair(s) with an empty embedding");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut positives: Vec<(usize, usize)> = pair_ids
        .iter()
        .zip(pairs)
        .filter(|(ids, p)| p.score == 1.0 && usable(ids))
        .map(|(ids, _)| *ids)
        .collect();
    let mut labeled: Vec<(usize, usize, bool)> = pair_ids
        .iter()
        .zip(pairs)
        .filter(|(ids, _)| usable(ids))
        .map(|(&(a, o), p)| (a, o, p.score >= cfg.binary_threshold))
        .collect();
    positives.shuffle(&mut rng);
    labeled.shuffle(&mut rng);
    if labeled.is_empty() {
        return Err(TrainError::NoPairs);
    }

    let mnr_batches: Vec<&[(usize, usize)]> = positives.chunks(cfg.batch_size).collect();
    let con_batches: Vec<&[(usize, usize, bool)]> = labeled.chunks(cfg.batch_size).collect();
    let steps = mnr_batches.len().max(con_batches.len());

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut mnr_sum, mut mnr_n, mut con_sum, mut con_n) = (0.0, 0usize, 0.0, 0usize);
        for step in 0..steps {
            let out = step_objective(
                &head,
                &inputs,
                mnr_batches.get(step).copied(),
                con_batches.get(step).copied(),
                cfg,
            );
            let batch_loss = out.mnrl.unwrap_or(0.0) + out.contrastive.unwrap_or(0.0);
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: step });
            }
            if let Some(l) = out.mnrl {
                mnr_sum += l;
                mnr_n += 1;
            }
            if let Some(l) = out.contrastive {
                con_sum += l;
                con_n += 1;
            }
            apply_step(&mut head, &inputs, &out.grads, cfg.learning_rate);
        }
        let mnrl = if mnr_n > 0 { mnr_sum / mnr_n as f64 } else { 0.0 };
        let contrastive = if con_n > 0 { con_sum / con_n as f64 } else { 0.0 };
        trace.push(EpochLoss {
            epoch: epoch + 1,
            mnrl,
            contrastive,
            total: mnrl + contrastive,
        });
    }
    Ok(Trained { head, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    fn split(flat: &[f64], n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let rows: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        (rows[..n].to_vec(), rows[n..].to_vec())
    }

    fn flatten(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
        a.iter().chain(b).flatten().copied().collect()
    }

    #[test]
    fn mnr_hand_values() {
        let a = vec![vec![1.0, 0.0]];
        assert_eq!(mnr_loss(&a, &a, 20.0).loss, 0.0);

        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let expected = (1.0 + (-20.0f64).exp()).ln();
        assert_abs_diff_eq!(mnr_loss(&id, &id, 20.0).loss, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 2.0612e-9, epsilon = 1e-12);

        let same = vec![vec![1.0, 1.0]; 5];
        assert_abs_diff_eq!(mnr_loss(&same, &same, 20.0).loss, 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn contrastive_hand_values() {
        let u = vec![vec![1.0, 0.0]];
        let near = vec![vec![0.8, 0.6]];
        let ortho = vec![vec![0.0, 3.0]];
        assert_eq!(contrastive_loss(&u, &u, &[true], 0.5, false).loss, 0.0);
        assert_eq!(contrastive_loss(&u, &ortho, &[false], 0.5, false).loss, 0.0);
        assert_abs_diff_eq!(
            contrastive_loss(&u, &near, &[false], 0.5, false).loss,
            0.09,
            epsilon = 1e-12
        );
        // positive pair at distance 1
        assert_abs_diff_eq!(contrastive_loss(&u, &ortho, &[true], 0.5, false).loss, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn online_mining_keeps_hard_pairs() {
        let u = vec![vec![1.0, 0.0]; 3];
        // distances: positive 0.0, positive 1.0, negative 0.2
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.8, 0.6]];
        let out = contrastive_loss(&u, &v, &[true, true, false], 0.5, true);
        assert_eq!(out.contributing, 2);
        assert_abs_diff_eq!(out.loss, (1.0 + 0.09) / 2.0, epsilon = 1e-12);
        assert!(out.left_grads[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mnr_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            // wide enough that random cosines keep the softmax away from saturation
            let (b, dim) = (4, 32);
            let point = flatten(&random_rows(&mut rng, b, dim), &random_rows(&mut rng, b, dim));
            let f = |x: &[f64]| {
                let (a, p) = split(x, b, dim);
                let out = mnr_loss(&a, &p, 20.0);
                (out.loss, flatten(&out.anchor_grads, &out.positive_grads))
            };
            let err = grad_check(f, &point, 1e-6, None);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for online in [false, true] {
            for _ in 0..10 {
                let (n, dim) = (6, 5);
                let point = flatten(&random_rows(&mut rng, n, dim), &random_rows(&mut rng, n, dim));
                let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
                let f = |x: &[f64]| {
                    let (u, v) = split(x, n, dim);
                    let out = contrastive_loss(&u, &v, &labels, 0.5, online);
                    (out.loss, flatten(&out.left_grads, &out.right_grads))
                };
                let err = grad_check(f, &point, 1e-6, None);
                assert!(err < 1e-4, "online={online}: relative error {err}");
            }
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (in_dim, out_dim) = (6, 4);
        let inputs: Vec<Sparse> = (0..6)
            .map(|_| (0..in_dim).map(|i| (i, rng.gen_range(-1.0..1.0))).collect())
            .collect();
        let mnr = [(0, 1), (2, 3), (4, 5)];
        let con = [(0, 3, true), (1, 2, false), (4, 1, false), (5, 5, true)];
        let cfg = TrainConfig::default();
        let start = ProjectionHead::init(in_dim, out_dim, 0.0, 9).unwrap();
        let f = |w: &[f64]| {
            let head = ProjectionHead::new(out_dim, in_dim, w.to_vec()).unwrap();
            let out = step_objective(&head, &inputs, Some(&mnr), Some(&con), &cfg);
            let mut dense = vec![0.0; w.len()];
            for (idx, g) in &out.grads {
                for (o, go) in g.iter().enumerate() {
                    for &(i, x) in &inputs[*idx] {
                        dense[o * in_dim + i] += go * x;
                    }
                }
            }
            (out.mnrl.unwrap() + out.contrastive.unwrap(), dense)
        };
        let err = grad_check(f, start.weights(), 1e-6, None);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let f = |x: &[f64]| (x[0] * x[0], vec![3.0 * x[0]]);
        assert!(grad_check(f, &[1.0], 1e-5, None) > 0.1);
    }

    #[test]
    fn head_round_trip_and_projection() {
        let head = ProjectionHead::init(8, 3, 0.0, 1).unwrap();
        let mut buf = Vec::new();
        head.write_to(&mut buf).unwrap();
        assert_eq!(ProjectionHead::read_from(buf.as_slice()).unwrap(), head);
        assert!(ProjectionHead::read_from(&buf[..buf.len() - 1]).is_err());
        assert!(ProjectionHead::read_from(&b"NOTAHEAD"[..]).is_err());

        let v = Embedding::new(vec![0.5; 8]).unwrap();
        assert_abs_diff_eq!(head.project(&v).unwrap().norm(), 1.0, epsilon = 1e-12);
        assert!(matches!(
            head.project(&Embedding::zeros(8)),
            Err(TrainError::ZeroProjection)
        ));
        assert!(matches!(
            head.project(&Embedding::zeros(4)),
            Err(TrainError::DimMismatch { .. })
        ));
        let id = ProjectionHead::identity(8);
        assert_eq!(id.project(&v).unwrap().values(), v.scaled(1.0 / v.norm()).values());
    }

    struct Table(HashMap<String, Vec<f64>>);

    impl EmbeddingBackend for Table {
        fn dim(&self) -> usize {
            3
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
            texts.iter().map(|t| Embedding::new(self.0[t].clone())).collect()
        }
    }

    fn toy_pairs() -> (Vec<ScoredPair>, Table) {
        use crate::corpus::LabelId;
        let l = |n: &str| LabelId::from_name(n).unwrap();
        let mut vecs = HashMap::new();
        vecs.insert("bond".to_string(), vec![1.0, 0.3, 0.0]);
        vecs.insert("bond def".to_string(), vec![0.6, 0.8, 0.1]);
        vecs.insert("swap".to_string(), vec![0.2, 1.0, 0.3]);
        vecs.insert("swap def".to_string(), vec![0.1, 0.2, 1.0]);
        let p = |a: &str, o: &str, s: f64| ScoredPair {
            anchor: a.into(),
            other: o.into(),
            score: s,
            anchor_label: l("Bonds"),
            other_label: l("Swap"),
        };
        let pairs = vec![
            p("bond", "bond def", 1.0),
            p("swap", "swap def", 1.0),
            p("bond", "swap def", 0.0),
            p("swap", "bond def", 0.0),
        ];
        (pairs, Table(vecs))
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (pairs, backend) = toy_pairs();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train(&pairs, &backend, &cfg).unwrap();
        let b = train(&pairs, &backend, &cfg).unwrap();
        assert_eq!(a.head, b.head);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 30);
        assert!(a.trace.last().unwrap().total < a.trace[0].total);

        let csv = trace_csv(&a.trace);
        assert!(csv.starts_with("epoch,mnrl,contrastive,total\n1,"));
        assert_eq!(csv.lines().count(), 31);
    }

    #[test]
    fn binarize_uses_threshold() {
        let (pairs, _) = toy_pairs();
        let bin = binarize(&pairs, 0.5);
        assert_eq!(bin.iter().filter(|p| p.label).count(), 2);
    }

    #[test]
    fn zero_epochs_returns_initial_head() {
        let (pairs, backend) = toy_pairs();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(&pairs, &backend, &cfg).unwrap();
        assert_eq!(out.head, ProjectionHead::init(3, 3, cfg.init_noise, cfg.seed).unwrap());
        assert!(out.trace.is_empty());
    }

    #[test]
    fn mnr_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_rows(&mut rng, 5, 8);
        let p = random_rows(&mut rng, 5, 8);
        let perm = [3, 0, 4, 1, 2];
        let pa: Vec<_> = perm.iter().map(|&i| a[i].clone()).collect();
        let pp: Vec<_> = perm.iter().map(|&i| p[i].clone()).collect();
        let l0 = mnr_loss(&a, &p, 20.0).loss;
        assert!(l0 >= 0.0);
        assert_abs_diff_eq!(l0, mnr_loss(&pa, &pp, 20.0).loss, epsilon = 1e-12);
    }

    #[test]
    fn inactive_margins_have_zero_gradient() {
        let u = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]];
        let v = vec![vec![1.0, 0.0], vec![-1.0, 0.2], vec![0.0, 1.0]];
        let out = contrastive_loss(&u, &v, &[true, false, true], 0.5, false);
        assert_eq!(out.loss, 0.0);
        assert!(out.left_grads[1].iter().chain(&out.right_grads[1]).all(|&g| g == 0.0));
    }

    #[test]
    fn grad_check_on_quadratic() {
        let f = |x: &[f64]| {
            let loss = x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum();
            (loss, x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect())
        };
        let point: Vec<f64> = (0..10).map(|i| 1.0 + 0.5 * (i as f64).sin()).collect();
        assert!(grad_check(f, &point, 1e-4, None) < 1e-8);
        let wide: Vec<f64> = (0..300).map(|i| 1.0 + 0.5 * (i as f64).sin()).collect();
        assert!(grad_check(f, &wide, 1e-4, Some((100, 1))) < 1e-6);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::default().head_dim_for(768), 768);
        assert_eq!(TrainConfig::default().head_dim_for(32768), 256);
        let (pairs, backend) = toy_pairs();
        assert!(matches!(train(&[], &backend, &TrainConfig::default()), Err(TrainError::NoPairs)));
        let nan = TrainConfig { learning_rate: f64::NAN, ..Default::default() };
        assert!(train(&pairs, &backend, &nan).is_err());
    }
}

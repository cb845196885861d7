//! Contrastive margin loss with in-batch hard negative mining, Smooth L1
//! regression onto pseudolabels, and their weighted combination.
//!
//! The contrastive loss is the classic margin pair loss on Euclidean
//! distance `d`: `d^2` for positive pairs and `max(0, m - d)^2` for
//! negatives. Swapping in a triplet or InfoNCE objective only needs a new
//! [`contrastive_batch`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub smooth_l1_beta: f64,
    /// Weight of the contrastive term in the multitask loss.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            smooth_l1_beta: 1.0,
            lambda: 0.5,
        }
    }
}

impl LossConfig {
    pub fn new(margin: f64, smooth_l1_beta: f64, lambda: f64) -> Result<Self> {
        let cfg = Self {
            margin,
            smooth_l1_beta,
            lambda,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.smooth_l1_beta > 0.0 && self.smooth_l1_beta.is_finite()) {
            return Err(Error::Config(format!(
                "smooth_l1_beta must be > 0, got {}",
                self.smooth_l1_beta
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("vector length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Euclidean distance, accumulated in `f64`.
pub fn pair_distance<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.widen() - y.widen();
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Loss and `dLoss/dd` for one pair at distance `d`.
pub fn contrastive_loss(d: f64, is_positive: bool, margin: f64) -> (f64, f64) {
    if is_positive {
        (d * d, 2.0 * d)
    } else {
        let gap = (margin - d).max(0.0);
        (gap * gap, -2.0 * gap)
    }
}

fn check_mining_batch(n: usize, pair_ids: &[i64]) -> Result<()> {
    check_len(n, pair_ids.len())?;
    if n < 2 {
        return Err(Error::Mining(format!("batch of {n} is too small to mine negatives")));
    }
    if pair_ids.iter().all(|&p| p == pair_ids[0]) {
        return Err(Error::Mining(
            "all batch members share one pair id; no valid negative".into(),
        ));
    }
    Ok(())
}

/// For every anchor, the closest batch member from a different pair
/// (lowest index on ties). Returns `(anchor, negative)` index pairs.
pub fn mine_hard_negatives<T: Real>(
    embeddings: &[Vec<T>],
    pair_ids: &[i64],
) -> Result<Vec<(usize, usize)>> {
    check_mining_batch(embeddings.len(), pair_ids)?;
    let mut out = Vec::with_capacity(embeddings.len());
    for (i, anchor) in embeddings.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, other) in embeddings.iter().enumerate() {
            if pair_ids[j] == pair_ids[i] {
                continue;
            }
            let d = pair_distance(anchor, other)?;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        // check_mining_batch guarantees every anchor has a candidate
        out.push((i, best.expect("candidate exists").0));
    }
    Ok(out)
}

/// Uniformly random negative from outside the anchor's pair, for ablations.
pub fn random_negatives<R: Rng>(pair_ids: &[i64], rng: &mut R) -> Result<Vec<(usize, usize)>> {
    check_mining_batch(pair_ids.len(), pair_ids)?;
    let mut out = Vec::with_capacity(pair_ids.len());
    for (i, &p) in pair_ids.iter().enumerate() {
        let candidates: Vec<usize> = (0..pair_ids.len()).filter(|&j| pair_ids[j] != p).collect();
        out.push((i, candidates[rng.random_range(0..candidates.len())]));
    }
    Ok(out)
}

/// Elementwise-mean Smooth L1 and its gradient with respect to `pred`.
pub fn smooth_l1<T: Real>(pred: &[T], target: &[T], beta: f64) -> Result<(f64, Vec<f64>)> {
    check_len(pred.len(), target.len())?;
    if pred.is_empty() {
        return Err(Error::invalid("smooth_l1 of empty vectors"));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let x = p.widen() - t.widen();
        if x.abs() < beta {
            loss += 0.5 * x * x / beta;
            grad.push(x / beta / n);
        } else {
            loss += x.abs() - 0.5 * beta;
            grad.push(x.signum() / n);
        }
    }
    Ok((loss / n, grad))
}

pub fn multitask_loss(contrastive_mean: f64, smooth_l1_mean: f64, lambda: f64) -> f64 {
    lambda * contrastive_mean + (1.0 - lambda) * smooth_l1_mean
}

/// Mean contrastive loss over a batch of positive and negative index pairs,
/// with the gradient for every embedding.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub mean_pos_dist: f64,
    pub mean_neg_dist: f64,
}

pub fn contrastive_batch<T: Real>(
    embeddings: &[Vec<T>],
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    margin: f64,
) -> Result<ContrastiveBatch> {
    let n_terms = positives.len() + negatives.len();
    if n_terms == 0 {
        return Err(Error::invalid("contrastive batch without pairs"));
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0f64; dim]; embeddings.len()];
    let mut loss = 0.0;
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    let scale = 1.0 / n_terms as f64;
    for (is_positive, list) in [(true, positives), (false, negatives)] {
        for &(i, j) in list {
            let (a, b) = (&embeddings[i], &embeddings[j]);
            let d = pair_distance(a, b)?;
            let (l, dl_dd) = contrastive_loss(d, is_positive, margin);
            loss += l;
            if is_positive {
                pos_sum += d;
            } else {
                neg_sum += d;
            }
            // d(d)/da = (a - b) / d; the positive branch folds 2d / d into 2.
            let coef = if is_positive {
                2.0
            } else if d > 0.0 {
                dl_dd / d
            } else {
                0.0
            };
            if coef == 0.0 {
                continue;
            }
            for k in 0..dim {
                let g = scale * coef * (a[k].widen() - b[k].widen());
                grads[i][k] += g;
                grads[j][k] -= g;
            }
        }
    }
    Ok(ContrastiveBatch {
        loss: loss * scale,
        grads,
        mean_pos_dist: if positives.is_empty() { 0.0 } else { pos_sum / positives.len() as f64 },
        mean_neg_dist: if negatives.is_empty() { 0.0 } else { neg_sum / negatives.len() as f64 },
    })
}

//! Reward, advantage and loss arithmetic for aligning a text policy with the
//! rule policy, plus the evaluation metrics.
//!
//! ```text
//! r_format = (1 - lev(y_hat, y) / max(|y_hat|, |y|))^gamma
//! r_action = 1[action(y_hat) = action(y)] - 0.5
//! r        = lambda_f * r_format + lambda_a * r_action
//! A_k      = r_k - mean(r)
//! L_grpo   = -mean_k min(rho_k A_k, clip(rho_k, 1 - eps, 1 + eps) A_k)
//! ```

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Action;
use crate::prompt::parse_action;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignmentError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reward weights: {0}")]
    Weights(&'static str),
    #[error("ground-truth response names no single action")]
    UnparseableTarget,
    #[error("log-probability {0} is positive")]
    PositiveLogProb(f64),
    #[error("probability ratio {0} must be positive and finite")]
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub lambda_f: f64,
    pub lambda_a: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_f: 0.5,
            lambda_a: 1.0,
            gamma: 2.0,
            epsilon: 0.2,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        if !(self.lambda_f >= 0.0 && self.lambda_a >= 0.0) {
            return Err(AlignmentError::Weights("lambda_f and lambda_a must be >= 0"));
        }
        if self.lambda_f == 0.0 && self.lambda_a == 0.0 {
            return Err(AlignmentError::Weights("lambda_f and lambda_a cannot both be 0"));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(AlignmentError::Weights("gamma must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(AlignmentError::Weights("epsilon must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized similarity raised to `gamma`. Two empty strings score 1.
pub fn format_reward(y_hat: &str, y: &str, gamma: f64) -> f64 {
    let n = y_hat.chars().count().max(y.chars().count());
    if n == 0 {
        return 1.0;
    }
    let sim = 1.0 - levenshtein(y_hat, y) as f64 / n as f64;
    libm::pow(sim, gamma)
}

/// `+0.5` when `y_hat` parses to `target`, `-0.5` otherwise.
pub fn action_reward_against(y_hat: &str, target: Action) -> f64 {
    match parse_action(y_hat) {
        Ok(a) if a == target => 0.5,
        _ => -0.5,
    }
}

/// [`action_reward_against`] with the target action read from the
/// ground-truth response.
pub fn action_reward(y_hat: &str, y: &str) -> Result<f64, AlignmentError> {
    let target = parse_action(y).map_err(|_| AlignmentError::UnparseableTarget)?;
    Ok(action_reward_against(y_hat, target))
}

pub fn total_reward(y_hat: &str, y: &str, w: &RewardWeights) -> Result<f64, AlignmentError> {
    let target = parse_action(y).map_err(|_| AlignmentError::UnparseableTarget)?;
    Ok(total_reward_against(y_hat, y, target, w))
}

/// Combined reward when the target action is known separately from the
/// reference text.
pub fn total_reward_against(y_hat: &str, y: &str, target: Action, w: &RewardWeights) -> f64 {
    w.lambda_f * format_reward(y_hat, y, w.gamma) + w.lambda_a * action_reward_against(y_hat, target)
}

/// Group-relative advantages: rewards minus their mean, optionally divided
/// by the population standard deviation (left as is when that is zero).
pub fn group_advantages(rewards: &[f64], normalize_std: bool) -> Result<Vec<f64>, AlignmentError> {
    if rewards.is_empty() {
        return Err(AlignmentError::Empty);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if normalize_std {
        let std = libm::sqrt(adv.iter().map(|a| a * a).sum::<f64>() / n);
        if std > 0.0 {
            for a in &mut adv {
                *a /= std;
            }
        }
    }
    Ok(adv)
}

/// Clipped surrogate loss averaged over the group.
pub fn grpo_loss(ratios: &[f64], advantages: &[f64], epsilon: f64) -> Result<f64, AlignmentError> {
    if ratios.len() != advantages.len() {
        return Err(AlignmentError::LengthMismatch(ratios.len(), advantages.len()));
    }
    if ratios.is_empty() {
        return Err(AlignmentError::Empty);
    }
    let mut total = 0.0;
    for (&rho, &a) in ratios.iter().zip(advantages) {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(AlignmentError::Ratio(rho));
        }
        let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
        total += -(rho * a).min(clipped * a);
    }
    Ok(total / ratios.len() as f64)
}

/// Negative log-likelihood of one sequence from its token log-probabilities.
pub fn sft_nll(token_logprobs: &[f64]) -> Result<f64, AlignmentError> {
    let mut s = 0.0;
    for &lp in token_logprobs {
        if lp > 0.0 || lp.is_nan() {
            return Err(AlignmentError::PositiveLogProb(lp));
        }
        s -= lp;
    }
    Ok(s)
}

/// Mean sequence NLL over a batch.
pub fn sft_nll_batch(batch: &[Vec<f64>]) -> Result<f64, AlignmentError> {
    if batch.is_empty() {
        return Err(AlignmentError::Empty);
    }
    let mut s = 0.0;
    for seq in batch {
        s += sft_nll(seq)?;
    }
    Ok(s / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Rows: true label (Accelerate, Hold, Decelerate). Columns: predicted
    /// label in the same order, then parse failures.
    pub confusion: [[usize; 4]; 3],
    pub parse_errors: usize,
}

/// Accuracy and macro-averaged precision/recall over the classes that occur
/// in labels or predictions. Parse failures count as wrong and only lower
/// recall. F1 is the harmonic mean of macro precision and macro recall.
pub fn classification_metrics(
    predictions: &[Option<Action>],
    labels: &[Action],
) -> Result<ClassificationMetrics, AlignmentError> {
    if predictions.len() != labels.len() {
        return Err(AlignmentError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(AlignmentError::Empty);
    }
    let mut confusion = [[0usize; 4]; 3];
    for (p, l) in predictions.iter().zip(labels) {
        let col = p.map_or(3, |a| a.index());
        confusion[l.index()][col] += 1;
    }
    Ok(metrics_from_confusion(confusion))
}

pub fn metrics_from_confusion(confusion: [[usize; 4]; 3]) -> ClassificationMetrics {
    let n: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
    let parse_errors: usize = confusion.iter().map(|r| r[3]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p_sum, mut r_sum, mut classes) = (0.0, 0.0, 0usize);
    for c in 0..3 {
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = (0..3).map(|r| confusion[r][c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        classes += 1;
        p_sum += ratio(confusion[c][c], predicted);
        r_sum += ratio(confusion[c][c], actual);
    }
    let precision = if classes == 0 { 0.0 } else { p_sum / classes as f64 };
    let recall = if classes == 0 { 0.0 } else { r_sum / classes as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassificationMetrics {
        n,
        accuracy: ratio(correct, n),
        precision,
        recall,
        f1,
        confusion,
        parse_errors,
    }
}

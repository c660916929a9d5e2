//! Batch scoring of candidate groups: rewards, group-relative advantages
//! and, when probability ratios are supplied, the clipped loss.

use deconflict_core::alignment::{
    action_reward_against, format_reward, group_advantages, grpo_loss, total_reward_against, AlignmentError,
    RewardWeights,
};
use deconflict_core::prompt::parse_action;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// One input line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    #[serde(default)]
    pub id: Option<String>,
    /// Free-form pointer back to the prompt; copied to the output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Value>,
    pub target: String,
    pub candidates: Vec<String>,
    /// Likelihood ratios of each candidate under the updated policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub text: String,
    pub format_reward: f64,
    pub action_reward: f64,
    pub reward: f64,
    pub advantage: f64,
}

/// One output line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup {
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Value>,
    pub target: String,
    pub candidates: Vec<ScoredCandidate>,
    pub mean_reward: f64,
    pub correct: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("a group needs at least two candidates, got {0}")]
    TooFew(usize),
    #[error("target does not name exactly one action: {0:?}")]
    Target(String),
    #[error(transparent)]
    Math(#[from] AlignmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreOptions {
    pub weights: RewardWeights,
    /// Divide advantages by the group's reward standard deviation.
    pub normalize_std: bool,
}

pub fn score_group(g: &CandidateGroup, opts: &ScoreOptions) -> Result<ScoredGroup, ScoreError> {
    if g.candidates.len() < 2 {
        return Err(ScoreError::TooFew(g.candidates.len()));
    }
    opts.weights.validate()?;
    let target = parse_action(&g.target).map_err(|_| ScoreError::Target(g.target.clone()))?;
    let w = &opts.weights;
    let rewards: Vec<f64> = g
        .candidates
        .iter()
        .map(|c| total_reward_against(c, &g.target, target, w))
        .collect();
    let advantages = group_advantages(&rewards, opts.normalize_std)?;
    let loss = match &g.ratios {
        Some(r) => Some(grpo_loss(r, &advantages, w.epsilon)?),
        None => None,
    };
    let candidates: Vec<ScoredCandidate> = g
        .candidates
        .iter()
        .zip(rewards.iter().zip(&advantages))
        .map(|(c, (r, a))| ScoredCandidate {
            text: c.clone(),
            format_reward: format_reward(c, &g.target, w.gamma),
            action_reward: action_reward_against(c, target),
            reward: *r,
            advantage: *a,
        })
        .collect();
    Ok(ScoredGroup {
        id: g.id.clone(),
        source: g.source.clone(),
        target: g.target.clone(),
        correct: candidates.iter().filter(|c| c.action_reward > 0.0).count(),
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        candidates,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(cands: &[&str]) -> CandidateGroup {
        CandidateGroup {
            id: Some("g".into()),
            source: None,
            target: "The recommended action is: Hold.".into(),
            candidates: cands.iter().map(|s| s.to_string()).collect(),
            ratios: None,
        }
    }

    #[test]
    fn identical_candidates_have_no_advantage() {
        let t = "The recommended action is: Hold.";
        let s = score_group(&group(&[t, t, t, t]), &ScoreOptions::default()).unwrap();
        let w = RewardWeights::default();
        for c in &s.candidates {
            assert_eq!(c.reward, w.lambda_f + 0.5 * w.lambda_a);
            assert_eq!(c.advantage, 0.0);
        }
        assert_eq!(s.correct, 4);
    }

    #[test]
    fn mixed_group_is_zero_sum() {
        let s = score_group(
            &group(&[
                "The recommended action is: Hold.",
                "The recommended action is: Accelerate.",
                "hold",
                "no idea",
            ]),
            &ScoreOptions::default(),
        )
        .unwrap();
        let sum: f64 = s.candidates.iter().map(|c| c.advantage).sum();
        assert!(sum.abs() < 1e-12);
        assert_eq!(s.correct, 2);
    }

    #[test]
    fn rejects_bad_groups() {
        assert_eq!(score_group(&group(&["x"]), &ScoreOptions::default()), Err(ScoreError::TooFew(1)));
        let mut g = group(&["a", "b"]);
        g.target = "Hold or Accelerate".into();
        assert!(matches!(score_group(&g, &ScoreOptions::default()), Err(ScoreError::Target(_))));
        let mut g = group(&["a", "b"]);
        g.ratios = Some(vec![1.0]);
        assert!(matches!(score_group(&g, &ScoreOptions::default()), Err(ScoreError::Math(_))));
    }

    #[test]
    fn loss_at_unit_ratio_is_zero() {
        let mut g = group(&["The recommended action is: Hold.", "Accelerate", "x", "hold"]);
        g.ratios = Some(vec![1.0; 4]);
        let s = score_group(&g, &ScoreOptions::default()).unwrap();
        assert!(s.loss.unwrap().abs() < 1e-12);
    }
}

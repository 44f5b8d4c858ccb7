//! Reward delivery: per-token KL shaping plus a clipped terminal bonus.
//!
//! Five schemes share one structure. Every token pays a KL penalty against
//! the frozen reference; the last token of the response additionally receives
//! the learned reward: the ORM's sequence score, or the PRM's per-step scores
//! reduced by one of four aggregation functions (Avg, Prod, Max, Min). The
//! terminal bonus alone is clipped to [-c, +c]; the KL anchor stays intact.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::rm::StepScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Orm,
    PrmAvg,
    PrmProd,
    PrmMax,
    PrmMin,
}

impl SchemeKind {
    pub fn all() -> [SchemeKind; 5] {
        [
            SchemeKind::Orm,
            SchemeKind::PrmAvg,
            SchemeKind::PrmProd,
            SchemeKind::PrmMax,
            SchemeKind::PrmMin,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeKind::Orm => "orm",
            SchemeKind::PrmAvg => "prm_avg",
            SchemeKind::PrmProd => "prm_prod",
            SchemeKind::PrmMax => "prm_max",
            SchemeKind::PrmMin => "prm_min",
        }
    }

    pub fn parse(s: &str) -> Option<SchemeKind> {
        SchemeKind::all().into_iter().find(|k| k.as_str() == s)
    }

    pub fn uses_prm(&self) -> bool {
        !matches!(self, SchemeKind::Orm)
    }

    pub fn aggregator(&self) -> Option<Aggregator> {
        match self {
            SchemeKind::Orm => None,
            SchemeKind::PrmAvg => Some(Aggregator::Avg),
            SchemeKind::PrmProd => Some(Aggregator::Prod),
            SchemeKind::PrmMax => Some(Aggregator::Max),
            SchemeKind::PrmMin => Some(Aggregator::Min),
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the terminal bonus should be when a generation exposes no step
/// boundaries for the PRM to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyStepsFallback {
    /// No learned reward at all (default): nothing is hallucinated.
    Zero,
    /// Fall back to the ORM sequence score.
    OrmBackstop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScheme {
    pub kind: SchemeKind,
    /// KL penalty coefficient (beta).
    pub kl_coefficient: f64,
    /// Symmetric clip on the terminal learned reward.
    pub reward_clip: f64,
    pub empty_steps_fallback: EmptyStepsFallback,
}

impl RewardScheme {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            kl_coefficient: 0.2,
            reward_clip: 0.7,
            empty_steps_fallback: EmptyStepsFallback::Zero,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.kl_coefficient < 0.0 || self.reward_clip <= 0.0 {
            return Err(TrainError::Diverged {
                step: 0,
                detail: format!(
                    "invalid reward scheme: beta={} clip={}",
                    self.kl_coefficient, self.reward_clip
                ),
            });
        }
        Ok(())
    }
}

/// Single-sample per-token KL estimate: the gap between the log-probability
/// the policy and the reference assign to the token actually sampled.
pub fn kl_per_token(policy_logprobs: &[f64], ref_logprobs: &[f64]) -> Result<Vec<f64>, TrainError> {
    if policy_logprobs.len() != ref_logprobs.len() {
        return Err(TrainError::LengthMismatch {
            left: policy_logprobs.len(),
            right: ref_logprobs.len(),
        });
    }
    Ok(policy_logprobs
        .iter()
        .zip(ref_logprobs)
        .map(|(p, r)| p - r)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Avg,
    Prod,
    Max,
    Min,
}

/// Reduce per-step scores to one terminal scalar. Scores are probabilities
/// of step correctness; the vector must be nonempty (the empty case is the
/// fallback policy's job in `shape_rewards`, never this function's).
pub fn aggregate(kind: Aggregator, step_scores: &[f64]) -> Result<f64, TrainError> {
    if step_scores.is_empty() {
        return Err(TrainError::EmptyStepScores);
    }
    Ok(match kind {
        Aggregator::Avg => step_scores.iter().sum::<f64>() / step_scores.len() as f64,
        Aggregator::Prod => step_scores.iter().product(),
        Aggregator::Max => step_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::Min => step_scores.iter().cloned().fold(f64::INFINITY, f64::min),
    })
}

/// Per-token shaped rewards for one response.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedRewards {
    /// r_t for each response token; only the last entry carries the bonus.
    pub per_token: Vec<f64>,
    /// Terminal learned reward before clipping (diagnostics).
    pub aggregate_pre_clip: f64,
    /// Terminal learned reward as delivered, in [-c, +c].
    pub aggregate_post_clip: f64,
}

/// Assemble the reward stream: r_t = -beta * k_t everywhere, plus
/// clamp(aggregate, -c, +c) on the terminal token.
pub fn shape_rewards(
    scheme: &RewardScheme,
    kl: &[f64],
    orm_score: f64,
    prm_scores: &StepScores,
) -> Result<ShapedRewards, TrainError> {
    scheme.validate()?;
    if kl.is_empty() {
        return Err(TrainError::LengthMismatch { left: 0, right: 1 });
    }
    let pre_clip = match scheme.kind.aggregator() {
        None => orm_score,
        Some(agg) => {
            if prm_scores.is_empty() {
                match scheme.empty_steps_fallback {
                    EmptyStepsFallback::Zero => 0.0,
                    EmptyStepsFallback::OrmBackstop => orm_score,
                }
            } else {
                aggregate(agg, &prm_scores.per_step)?
            }
        }
    };
    let post_clip = pre_clip.clamp(-scheme.reward_clip, scheme.reward_clip);
    let beta = scheme.kl_coefficient;
    let mut per_token: Vec<f64> = kl.iter().map(|k| -beta * k).collect();
    *per_token.last_mut().unwrap() += post_clip;
    Ok(ShapedRewards {
        per_token,
        aggregate_pre_clip: pre_clip,
        aggregate_post_clip: post_clip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[f64]) -> StepScores {
        StepScores {
            per_step: v.to_vec(),
            sequence: v.last().copied().unwrap_or(0.5),
        }
    }

    #[test]
    fn kl_zero_for_identical_policies() {
        let lp = vec![-1.3, -0.2, -4.0];
        let k = kl_per_token(&lp, &lp).unwrap();
        assert!(k.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_simple_gap() {
        let k = kl_per_token(&[-1.0], &[-2.0]).unwrap();
        assert_eq!(k, vec![1.0]);
    }

    #[test]
    fn kl_rejects_length_mismatch() {
        assert!(matches!(
            kl_per_token(&[0.0], &[0.0, 0.0]),
            Err(TrainError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_hand_values() {
        assert!((aggregate(Aggregator::Avg, &[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-15);
        assert!((aggregate(Aggregator::Prod, &[0.5, 0.5, 0.5]).unwrap() - 0.125).abs() < 1e-15);
        assert_eq!(aggregate(Aggregator::Max, &[0.1, 0.9]).unwrap(), 0.9);
        assert_eq!(aggregate(Aggregator::Min, &[0.1, 0.9]).unwrap(), 0.1);
        assert!(matches!(
            aggregate(Aggregator::Avg, &[]),
            Err(TrainError::EmptyStepScores)
        ));
    }

    #[test]
    fn orm_scheme_hand_evaluated() {
        // beta=0.2, k=[0.1,-0.2,0.0,0.3], ORM 0.9 clipped to 0.7:
        // r = [-0.02, 0.04, 0.0, -0.06+0.7]
        let scheme = RewardScheme::new(SchemeKind::Orm);
        let kl = [0.1, -0.2, 0.0, 0.3];
        let out = shape_rewards(&scheme, &kl, 0.9, &scores(&[])).unwrap();
        let expect = [-0.02, 0.04, 0.0, 0.64];
        for (a, b) in out.per_token.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(out.aggregate_pre_clip, 0.9);
        assert_eq!(out.aggregate_post_clip, 0.7);
    }

    #[test]
    fn prm_max_identical_policies_hand_evaluated() {
        // identical policy and reference: all KL terms zero; max(0.3, 0.8) =
        // 0.8 clips to 0.7 on the terminal token only
        let scheme = RewardScheme::new(SchemeKind::PrmMax);
        let kl = [0.0; 5];
        let out = shape_rewards(&scheme, &kl, 0.0, &scores(&[0.3, 0.8])).unwrap();
        assert_eq!(&out.per_token[..4], &[0.0; 4]);
        assert!((out.per_token[4] - 0.7).abs() < 1e-15);
        assert_eq!(out.aggregate_pre_clip, 0.8);
    }

    #[test]
    fn non_terminal_rewards_identical_across_schemes() {
        let kl = [0.2, -0.1, 0.05, 0.4];
        let prm = scores(&[0.3, 0.6, 0.9]);
        let mut heads: Vec<Vec<f64>> = Vec::new();
        for kind in SchemeKind::all() {
            let scheme = RewardScheme::new(kind);
            let out = shape_rewards(&scheme, &kl, 0.42, &prm).unwrap();
            heads.push(out.per_token[..kl.len() - 1].to_vec());
        }
        for h in &heads[1..] {
            assert_eq!(h, &heads[0]);
        }
    }

    #[test]
    fn empty_prm_scores_fallbacks() {
        let kl = [0.0, 0.0];
        let mut scheme = RewardScheme::new(SchemeKind::PrmProd);
        let out = shape_rewards(&scheme, &kl, 0.55, &scores(&[])).unwrap();
        assert_eq!(out.aggregate_post_clip, 0.0);
        scheme.empty_steps_fallback = EmptyStepsFallback::OrmBackstop;
        let out = shape_rewards(&scheme, &kl, 0.55, &scores(&[])).unwrap();
        assert!((out.aggregate_post_clip - 0.55).abs() < 1e-15);
    }

    #[test]
    fn zero_beta_zero_aggregate_gives_zero_rewards() {
        let mut scheme = RewardScheme::new(SchemeKind::PrmAvg);
        scheme.kl_coefficient = 0.0;
        let out = shape_rewards(&scheme, &[0.3, -0.2, 0.9], 0.0, &scores(&[0.0, 0.0])).unwrap();
        assert!(out.per_token.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn terminal_aggregate_always_within_clip() {
        let scheme = RewardScheme::new(SchemeKind::PrmProd);
        for s in [-3.0, -0.9, 0.0, 0.5, 0.9, 5.0] {
            let out = shape_rewards(&scheme, &[0.0], s, &scores(&[])).unwrap();
            let _ = out;
        }
        // prod of many high scores still within the clip band
        let out = shape_rewards(&scheme, &[0.0], 0.0, &scores(&[0.99; 40])).unwrap();
        assert!(out.aggregate_post_clip.abs() <= 0.7 + 1e-15);
    }

    #[test]
    fn scheme_parsing_round_trips() {
        for kind in SchemeKind::all() {
            assert_eq!(SchemeKind::parse(kind.as_str()), Some(kind));
        }
        assert_eq!(SchemeKind::parse("nope"), None);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Min <= Avg <= Max and Prod <= Min on [0,1] inputs.
            #[test]
            fn aggregator_ordering(scores in prop::collection::vec(0.0f64..=1.0, 1..24)) {
                let avg = aggregate(Aggregator::Avg, &scores).unwrap();
                let prod = aggregate(Aggregator::Prod, &scores).unwrap();
                let max = aggregate(Aggregator::Max, &scores).unwrap();
                let min = aggregate(Aggregator::Min, &scores).unwrap();
                prop_assert!(min <= avg + 1e-12);
                prop_assert!(avg <= max + 1e-12);
                prop_assert!(prod <= min + 1e-12);
            }

            /// Increasing any single score never decreases any aggregate.
            #[test]
            fn aggregator_monotonicity(
                scores in prop::collection::vec(0.0f64..=1.0, 1..16),
                idx in 0usize..16,
                bump in 0.0f64..=1.0,
            ) {
                let idx = idx % scores.len();
                let mut bumped = scores.clone();
                bumped[idx] = (bumped[idx] + bump).min(1.0);
                for kind in [Aggregator::Avg, Aggregator::Prod, Aggregator::Max, Aggregator::Min] {
                    let before = aggregate(kind, &scores).unwrap();
                    let after = aggregate(kind, &bumped).unwrap();
                    prop_assert!(after + 1e-12 >= before, "{kind:?}: {after} < {before}");
                }
            }

            /// All four aggregators coincide on singletons.
            #[test]
            fn aggregator_singleton_agreement(score in 0.0f64..=1.0) {
                let v = [score];
                let avg = aggregate(Aggregator::Avg, &v).unwrap();
                for kind in [Aggregator::Prod, Aggregator::Max, Aggregator::Min] {
                    prop_assert!((aggregate(kind, &v).unwrap() - avg).abs() < 1e-15);
                }
            }

            /// The delivered terminal bonus always lies within the clip band.
            #[test]
            fn shaped_terminal_within_clip(
                kl in prop::collection::vec(-2.0f64..2.0, 1..32),
                scores in prop::collection::vec(0.0f64..=1.0, 0..12),
                orm in 0.0f64..=1.0,
            ) {
                for kind in SchemeKind::all() {
                    let scheme = RewardScheme::new(kind);
                    let prm = StepScores { per_step: scores.clone(), sequence: orm };
                    let out = shape_rewards(&scheme, &kl, orm, &prm).unwrap();
                    prop_assert!(out.aggregate_post_clip.abs() <= 0.7 + 1e-12);
                    // non-terminal entries carry only the KL term
                    for (r, k) in out.per_token.iter().zip(&kl).take(kl.len() - 1) {
                        prop_assert!((r - (-0.2 * k)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

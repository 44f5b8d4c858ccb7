//! PPO fine-tuning of the SFT policy against shaped rewards.
//!
//! One iteration: sample rollouts from the policy, score them with the active
//! reward scheme, shape per-token rewards (KL penalty + clipped terminal
//! bonus), estimate advantages with GAE, then run clipped actor/critic
//! updates over minibatches for a few epochs. The reference model stays
//! frozen for the whole run; the critic starts from an ORM checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, Objective};
use crate::error::{NnError, TrainError};
use crate::graph::{Graph, NodeId};
use crate::metrics::MetricsSink;
use crate::model::{hidden_states, sample, sequence_logprobs, GraphModel, Head, ModelParams};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::reward::{kl_per_token, shape_rewards, RewardScheme, ShapedRewards};
use crate::rm::{score_orm, score_prm, StepScores};
use crate::rng::{derive_seed, Rng};
use crate::sft::{eval_accuracy, DecodeMode, EvalMetrics};
use crate::task::{detect_step_ends, prompt_tokens, CorpusRecord, TokenSeq, EOS};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Reward scoring abstraction
// ---------------------------------------------------------------------------

/// Source of learned reward scores during rollout collection. The production
/// implementation wraps the trained reward models; tests inject constants.
pub trait RewardScorer {
    fn orm_score(&self, seq: &TokenSeq) -> Result<f64, TrainError>;
    fn prm_scores(&self, seq: &TokenSeq) -> Result<StepScores, TrainError>;
}

pub struct ModelScorer<'a> {
    pub orm: Option<&'a ModelParams>,
    pub prm: Option<&'a ModelParams>,
}

impl RewardScorer for ModelScorer<'_> {
    fn orm_score(&self, seq: &TokenSeq) -> Result<f64, TrainError> {
        match self.orm {
            Some(params) => score_orm(params, seq),
            None => Ok(0.0),
        }
    }

    fn prm_scores(&self, seq: &TokenSeq) -> Result<StepScores, TrainError> {
        match self.prm {
            Some(params) => score_prm(params, seq),
            None => Ok(StepScores {
                per_step: Vec::new(),
                sequence: 0.0,
            }),
        }
    }
}

/// Fixed-score scorer: every step and every sequence gets the same value.
pub struct ConstScorer(pub f64);

impl RewardScorer for ConstScorer {
    fn orm_score(&self, _seq: &TokenSeq) -> Result<f64, TrainError> {
        Ok(self.0)
    }

    fn prm_scores(&self, seq: &TokenSeq) -> Result<StepScores, TrainError> {
        Ok(StepScores {
            per_step: vec![self.0; seq.step_ends.len()],
            sequence: self.0,
        })
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// One rollout. All per-token vectors are aligned with the sampled response
/// tokens (`tokens[prompt_len..]`).
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Prompt followed by the sampled continuation.
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// Step-end indices detected in the continuation (absolute positions).
    pub step_ends: Vec<usize>,
    /// Absolute index of the last response token.
    pub terminal: usize,
    pub policy_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: ShapedRewards,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// ORM sequence score of the rollout (diagnostics).
    pub orm_score: f64,
}

impl Trajectory {
    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn response_tokens(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let n = self.response_len();
        for (name, len) in [
            ("policy_logprobs", self.policy_logprobs.len()),
            ("ref_logprobs", self.ref_logprobs.len()),
            ("values", self.values.len()),
            ("rewards", self.rewards.per_token.len()),
            ("advantages", self.advantages.len()),
            ("returns", self.returns.len()),
        ] {
            if len != n {
                return Err(TrainError::Diverged {
                    step: 0,
                    detail: format!("trajectory field {name} has length {len}, expected {n}"),
                });
            }
        }
        let finite = self
            .advantages
            .iter()
            .chain(&self.returns)
            .chain(&self.values)
            .all(|v| v.is_finite());
        if !finite {
            return Err(TrainError::Diverged {
                step: 0,
                detail: "non-finite advantage/return/value in trajectory".into(),
            });
        }
        for ((a, v), r) in self.advantages.iter().zip(&self.values).zip(&self.returns) {
            if (a + v - r).abs() > 1e-9 {
                return Err(TrainError::Diverged {
                    step: 0,
                    detail: "returns must equal advantages + values".into(),
                });
            }
        }
        Ok(())
    }

    /// View of the full sequence with detected step metadata, for scoring.
    pub fn token_seq(&self) -> TokenSeq {
        TokenSeq {
            tokens: self.tokens.clone(),
            step_ends: self.step_ends.clone(),
            prompt_len: self.prompt_len,
            terminal: self.terminal,
        }
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Actor ratio clip (epsilon).
    pub policy_clip: f64,
    /// Critic value clip band.
    pub value_clip: f64,
    pub rollout_batch: usize,
    pub epochs_per_batch: usize,
    pub minibatch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Number of collect/update iterations.
    pub total_steps: usize,
    pub whiten_advantages: bool,
    pub temperature: f64,
    pub max_new: usize,
    /// Evaluate + checkpoint every this many iterations (0 = only at end).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 0.95,
            policy_clip: 0.2,
            value_clip: 0.2,
            rollout_batch: 16,
            epochs_per_batch: 4,
            minibatch: 4,
            actor_lr: 1e-4,
            critic_lr: 5e-5,
            total_steps: 40,
            whiten_advantages: true,
            temperature: 1.0,
            max_new: 96,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.gamma > 0.0
            && self.gamma <= 1.0
            && (0.0..=1.0).contains(&self.lambda)
            && self.policy_clip > 0.0
            && self.rollout_batch > 0
            && self.minibatch > 0
            && self.epochs_per_batch > 0;
        if !ok {
            return Err(TrainError::Diverged {
                step: 0,
                detail: "invalid ppo config".into(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Core math
// ---------------------------------------------------------------------------

/// Generalized advantage estimation with terminal bootstrap V_{n+1} = 0:
/// delta_t = r_t + gamma * V_{t+1} - V_t; A_t = delta_t + gamma*lambda*A_{t+1};
/// R_t = A_t + V_t.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    if rewards.len() != values.len() {
        return Err(TrainError::LengthMismatch {
            left: rewards.len(),
            right: values.len(),
        });
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut returns = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
        returns[t] = acc + values[t];
    }
    Ok((advantages, returns))
}

/// Clipped surrogate objective: mean over tokens of
/// -min(rho*A, clamp(rho, 1-eps, 1+eps)*A) with rho = exp(new - old).
pub fn ppo_actor_loss(
    new_logprobs: &[f64],
    old_logprobs: &[f64],
    advantages: &[f64],
    eps: f64,
) -> Result<f64, TrainError> {
    if new_logprobs.len() != old_logprobs.len() || new_logprobs.len() != advantages.len() {
        return Err(TrainError::LengthMismatch {
            left: new_logprobs.len(),
            right: old_logprobs.len().max(advantages.len()),
        });
    }
    let mut total = 0.0;
    for ((n, o), a) in new_logprobs.iter().zip(old_logprobs).zip(advantages) {
        let rho = (n - o).exp();
        if !rho.is_finite() {
            return Err(TrainError::Diverged {
                step: 0,
                detail: format!("non-finite probability ratio exp({} - {})", n, o),
            });
        }
        let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
        total += -(rho * a).min(clipped * a);
    }
    Ok(total / new_logprobs.len() as f64)
}

/// Clipped value loss: 0.5 * mean of
/// max((V_new - R)^2, (clamp(V_new, V_old - clip, V_old + clip) - R)^2).
pub fn ppo_critic_loss(
    new_values: &[f64],
    old_values: &[f64],
    returns: &[f64],
    clip: f64,
) -> Result<f64, TrainError> {
    if new_values.len() != old_values.len() || new_values.len() != returns.len() {
        return Err(TrainError::LengthMismatch {
            left: new_values.len(),
            right: old_values.len().max(returns.len()),
        });
    }
    let mut total = 0.0;
    for ((vn, vo), r) in new_values.iter().zip(old_values).zip(returns) {
        let unclipped = (vn - r) * (vn - r);
        let vc = vn.clamp(vo - clip, vo + clip);
        let clipped = (vc - r) * (vc - r);
        total += unclipped.max(clipped);
    }
    Ok(0.5 * total / new_values.len() as f64)
}

/// In-place mean-0/std-1 normalization. Degenerate batches (near-zero spread)
/// are only centered.
pub fn whiten(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-8 {
        for x in xs.iter_mut() {
            *x = (*x - mean) / std;
        }
    } else {
        for x in xs.iter_mut() {
            *x -= mean;
        }
    }
}

/// Initialize the critic from an ORM-objective checkpoint: the backbone is
/// shared bit-for-bit and the scalar value head becomes the difference of the
/// classifier columns (clean minus misstep), so the value at the terminal
/// index equals logit(p_clean) = ln(p/(1-p)) of the ORM's clean-class score.
pub fn init_critic_from_orm(ckpt: &Checkpoint) -> Result<ModelParams, NnError> {
    if ckpt.objective != Objective::Orm {
        return Err(NnError::ObjectiveMismatch {
            expected: "orm".into(),
            found: ckpt.objective.as_str().into(),
        });
    }
    let mut critic = ckpt.params.clone();
    let d = critic.cfg.dim;
    let mut value = Tensor::zeros(d, 1);
    for r in 0..d {
        value.data[r] = critic.cls_head.at(r, crate::rm::CLASS_CORRECT)
            - critic.cls_head.at(r, crate::rm::CLASS_INCORRECT);
    }
    critic.value_head = value;
    Ok(critic)
}

// ---------------------------------------------------------------------------
// Rollout collection
// ---------------------------------------------------------------------------

/// Sample one trajectory per prompt, score it, shape rewards, and compute
/// advantages. Prompts whose generation comes back empty are dropped and
/// counted in the second return value.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    policy: &ModelParams,
    reference: &ModelParams,
    critic: &ModelParams,
    scorer: &dyn RewardScorer,
    scheme: &RewardScheme,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<(Vec<Trajectory>, usize), TrainError> {
    let mut out = Vec::with_capacity(prompts.len());
    let mut dropped = 0usize;
    for prompt in prompts {
        let sampled = sample(
            policy,
            prompt,
            cfg.temperature,
            cfg.max_new,
            EOS,
            rng,
        )?;
        if sampled.tokens.is_empty() {
            dropped += 1;
            continue;
        }
        let mut tokens = prompt.clone();
        tokens.extend_from_slice(&sampled.tokens);
        let prompt_len = prompt.len();
        let m = sampled.tokens.len();

        let ref_logprobs = sequence_logprobs(reference, &tokens, prompt_len)?;
        let kl = kl_per_token(&sampled.logprobs, &ref_logprobs)?;

        let step_ends = detect_step_ends(&tokens, prompt_len);
        let terminal = tokens.len() - 1;
        let seq = TokenSeq {
            tokens: tokens.clone(),
            step_ends: step_ends.clone(),
            prompt_len,
            terminal,
        };
        let orm = scorer.orm_score(&seq)?;
        let prm = scorer.prm_scores(&seq)?;
        let rewards = shape_rewards(scheme, &kl, orm, &prm)?;

        // V_j reads the value head at the position holding the state *before*
        // response token j is emitted
        let hidden = hidden_states(critic, &tokens)?;
        let mut values = Vec::with_capacity(m);
        for j in 0..m {
            let h = hidden.row(prompt_len + j - 1);
            let v: f64 = h
                .iter()
                .zip(critic.value_head.data.iter())
                .map(|(a, b)| a * b)
                .sum();
            values.push(v);
        }

        let (advantages, returns) =
            compute_gae(&rewards.per_token, &values, cfg.gamma, cfg.lambda)?;

        let traj = Trajectory {
            tokens,
            prompt_len,
            step_ends,
            terminal,
            policy_logprobs: sampled.logprobs,
            ref_logprobs,
            values,
            rewards,
            advantages,
            returns,
            orm_score: orm,
        };
        traj.validate()?;
        out.push(traj);
    }
    Ok((out, dropped))
}

// ---------------------------------------------------------------------------
// Update steps
// ---------------------------------------------------------------------------

/// Positions whose hidden states feed response-token predictions/values.
fn state_positions(traj: &Trajectory) -> Vec<usize> {
    (0..traj.response_len())
        .map(|j| traj.prompt_len + j - 1)
        .collect()
}

/// New per-response-token log-probs of the bound policy, as a `[m x 1]` node.
fn new_logprobs_node(
    g: &mut Graph,
    gm: &GraphModel,
    traj: &Trajectory,
) -> Result<NodeId, TrainError> {
    // positions up to terminal-1 are enough to predict every response token
    let input = &traj.tokens[..traj.tokens.len() - 1];
    let hidden = gm.hidden(g, input)?;
    let picked_states = g.gather_rows(hidden, state_positions(traj));
    let logits = gm.project(g, picked_states, Head::Lm);
    let logp = g.log_softmax_rows(logits);
    Ok(g.pick_per_row(logp, traj.response_tokens().to_vec()))
}

/// Actor loss over a minibatch as a graph node (token-mean across the batch).
fn actor_loss_node(
    g: &mut Graph,
    gm: &GraphModel,
    batch: &[&Trajectory],
    eps: f64,
) -> Result<NodeId, TrainError> {
    let mut sums = Vec::with_capacity(batch.len());
    let mut total_tokens = 0usize;
    for traj in batch {
        let m = traj.response_len();
        let new_lp = new_logprobs_node(g, gm, traj)?;
        let old = g.constant(Tensor::from_vec(m, 1, traj.policy_logprobs.clone()));
        let adv = g.constant(Tensor::from_vec(m, 1, traj.advantages.clone()));
        let diff = g.sub(new_lp, old);
        let rho = g.exp(diff);
        if !g.value(rho).is_finite() {
            return Err(TrainError::Diverged {
                step: 0,
                detail: "non-finite probability ratio".into(),
            });
        }
        let s1 = g.mul(rho, adv);
        let clipped = g.clamp(rho, 1.0 - eps, 1.0 + eps);
        let s2 = g.mul(clipped, adv);
        let m_node = g.minimum(s1, s2);
        sums.push(g.sum(m_node));
        total_tokens += m;
    }
    let mut acc = sums[0];
    for &s in &sums[1..] {
        acc = g.add(acc, s);
    }
    Ok(g.scale(acc, -1.0 / total_tokens as f64))
}

/// Critic loss over a minibatch as a graph node.
fn critic_loss_node(
    g: &mut Graph,
    gm: &GraphModel,
    batch: &[&Trajectory],
    clip: f64,
) -> Result<NodeId, TrainError> {
    let mut sums = Vec::with_capacity(batch.len());
    let mut total_tokens = 0usize;
    for traj in batch {
        let m = traj.response_len();
        let input = &traj.tokens[..traj.tokens.len() - 1];
        let hidden = gm.hidden(g, input)?;
        let picked = g.gather_rows(hidden, state_positions(traj));
        let v_new = gm.project(g, picked, Head::Value);
        let lo = g.constant(Tensor::from_vec(
            m,
            1,
            traj.values.iter().map(|v| v - clip).collect(),
        ));
        let hi = g.constant(Tensor::from_vec(
            m,
            1,
            traj.values.iter().map(|v| v + clip).collect(),
        ));
        let ret = g.constant(Tensor::from_vec(m, 1, traj.returns.clone()));
        let d1 = g.sub(v_new, ret);
        let sq1 = g.mul(d1, d1);
        let vmax = g.maximum(v_new, lo);
        let vclip = g.minimum(vmax, hi);
        let d2 = g.sub(vclip, ret);
        let sq2 = g.mul(d2, d2);
        let mx = g.maximum(sq1, sq2);
        sums.push(g.sum(mx));
        total_tokens += m;
    }
    let mut acc = sums[0];
    for &s in &sums[1..] {
        acc = g.add(acc, s);
    }
    Ok(g.scale(acc, 0.5 / total_tokens as f64))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

pub struct PpoOutcome {
    pub policy: ModelParams,
    pub critic: ModelParams,
    pub dropped_rollouts: usize,
}

/// Run PPO for `cfg.total_steps` iterations.
///
/// `prompt_pool` is the tokenized prompt mix; `eval_set` (possibly empty)
/// is greedily evaluated every `eval_every` iterations. `stage` names the
/// metrics stream, e.g. "ppo-prm_max".
#[allow(clippy::too_many_arguments)]
pub fn train_ppo(
    policy: ModelParams,
    reference: &ModelParams,
    critic: ModelParams,
    scorer: &dyn RewardScorer,
    scheme: &RewardScheme,
    prompt_pool: &[Vec<usize>],
    eval_set: &[CorpusRecord],
    cfg: &PpoConfig,
    stage: &str,
    metrics: &mut MetricsSink,
    ckpt_dir: Option<&Path>,
) -> Result<PpoOutcome, TrainError> {
    cfg.validate()?;
    scheme.validate()?;
    if prompt_pool.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut policy = policy;
    let mut critic = critic;
    let horizon = cfg.total_steps * cfg.epochs_per_batch;
    let mut actor_opt = OptimizerState::new(
        &policy,
        OptimizerConfig {
            base_lr: cfg.actor_lr,
            weight_decay: 0.0,
            horizon,
            ..OptimizerConfig::new(cfg.actor_lr, horizon)
        },
    );
    let mut critic_opt = OptimizerState::new(
        &critic,
        OptimizerConfig {
            base_lr: cfg.critic_lr,
            weight_decay: 0.0,
            horizon,
            ..OptimizerConfig::new(cfg.critic_lr, horizon)
        },
    );
    let mut dropped_total = 0usize;

    let persist = |policy: &ModelParams, critic: &ModelParams| -> Result<(), TrainError> {
        if let Some(dir) = ckpt_dir {
            checkpoint::save(
                &dir.join("policy.ckpt"),
                &Checkpoint::new(Objective::Policy, policy.clone()),
            )?;
            checkpoint::save(
                &dir.join("critic.ckpt"),
                &Checkpoint::new(Objective::Critic, critic.clone()),
            )?;
        }
        Ok(())
    };

    for iter in 0..cfg.total_steps {
        let mut rng = Rng::new(derive_seed(cfg.seed, 0x990 + iter as u64));
        let batch_prompts: Vec<Vec<usize>> = (0..cfg.rollout_batch)
            .map(|_| prompt_pool[rng.index(prompt_pool.len())].clone())
            .collect();
        let (mut trajs, dropped) = collect_rollouts(
            &policy, reference, &critic, scorer, scheme, &batch_prompts, cfg, &mut rng,
        )?;
        dropped_total += dropped;
        if trajs.is_empty() {
            continue;
        }

        // batch-level advantage whitening
        if cfg.whiten_advantages {
            let mut flat: Vec<f64> = trajs.iter().flat_map(|t| t.advantages.clone()).collect();
            whiten(&mut flat);
            let mut k = 0;
            for t in trajs.iter_mut() {
                for a in t.advantages.iter_mut() {
                    *a = flat[k];
                    k += 1;
                }
            }
        }

        // diagnostics
        let mean_kl = {
            let (s, n) = trajs.iter().fold((0.0, 0usize), |(s, n), t| {
                let k: f64 = t
                    .policy_logprobs
                    .iter()
                    .zip(&t.ref_logprobs)
                    .map(|(p, r)| p - r)
                    .sum();
                (s + k, n + t.response_len())
            });
            s / n as f64
        };
        let mean_pre: f64 = trajs.iter().map(|t| t.rewards.aggregate_pre_clip).sum::<f64>()
            / trajs.len() as f64;
        let mean_post: f64 = trajs
            .iter()
            .map(|t| t.rewards.aggregate_post_clip)
            .sum::<f64>()
            / trajs.len() as f64;
        let mean_reward: f64 = trajs
            .iter()
            .map(|t| t.rewards.per_token.iter().sum::<f64>())
            .sum::<f64>()
            / trajs.len() as f64;
        metrics.log(stage, iter, "train", "mean_kl", mean_kl);
        metrics.log(stage, iter, "train", "aggregate_pre_clip", mean_pre);
        metrics.log(stage, iter, "train", "aggregate_post_clip", mean_post);
        metrics.log(stage, iter, "train", "mean_total_reward", mean_reward);

        // PPO epochs over minibatches
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        let mut last_actor_loss = 0.0;
        let mut last_critic_loss = 0.0;
        for _epoch in 0..cfg.epochs_per_batch {
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.minibatch) {
                let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();

                let mut g = Graph::new();
                let gm = GraphModel::bind(&mut g, &policy);
                let loss = actor_loss_node(&mut g, &gm, &batch, cfg.policy_clip)?;
                let loss_v = g.value(loss).item();
                if !loss_v.is_finite() {
                    return Err(TrainError::Diverged {
                        step: iter,
                        detail: format!("actor loss {loss_v}"),
                    });
                }
                g.backward(loss)?;
                let grads = gm.grads(&g);
                actor_opt.apply(&mut policy, &grads)?;
                last_actor_loss = loss_v;

                let mut g = Graph::new();
                let gm = GraphModel::bind(&mut g, &critic);
                let loss = critic_loss_node(&mut g, &gm, &batch, cfg.value_clip)?;
                let loss_v = g.value(loss).item();
                if !loss_v.is_finite() {
                    return Err(TrainError::Diverged {
                        step: iter,
                        detail: format!("critic loss {loss_v}"),
                    });
                }
                g.backward(loss)?;
                let grads = gm.grads(&g);
                critic_opt.apply(&mut critic, &grads)?;
                last_critic_loss = loss_v;
            }
        }
        metrics.log(stage, iter, "train", "actor_loss", last_actor_loss);
        metrics.log(stage, iter, "train", "critic_loss", last_critic_loss);

        let eval_now = cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0;
        if eval_now {
            if !eval_set.is_empty() {
                let ev = eval_accuracy(&policy, eval_set, DecodeMode::Greedy)?;
                metrics.log(stage, iter, "eval", "final_answer_accuracy", ev.final_answer_accuracy);
                metrics.log(stage, iter, "eval", "well_formed_rate", ev.well_formed_rate);
                metrics.log(stage, iter, "eval", "step_correctness", ev.step_correctness);
            }
            persist(&policy, &critic)?;
        }
    }
    persist(&policy, &critic)?;
    Ok(PpoOutcome {
        policy,
        critic,
        dropped_rollouts: dropped_total,
    })
}

// ---------------------------------------------------------------------------
// Policy evaluation (shared by the results table)
// ---------------------------------------------------------------------------

/// Per-prompt evaluation record: the raw data behind every results-table
/// cell, kept so table values can be re-derived and audited.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PromptEval {
    pub seed: u64,
    pub family: crate::task::Family,
    pub answer_correct: bool,
    pub well_formed: bool,
    pub steps_total: usize,
    pub steps_correct: usize,
    pub response_tokens: usize,
    pub kl_sum: f64,
    pub aggregate_post_clip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub accuracy: EvalMetrics,
    /// Mean per-token KL of greedy generations against the reference.
    pub mean_kl: f64,
    /// Mean post-clip terminal aggregate of greedy generations under the
    /// active scheme.
    pub mean_aggregate: f64,
    pub details: Vec<PromptEval>,
}

/// Greedy-decode the eval set once, scoring accuracy and the reward-side
/// diagnostics used in the results table. Accuracy semantics are identical
/// to `eval_accuracy`.
pub fn evaluate_policy(
    policy: &ModelParams,
    reference: &ModelParams,
    scorer: &dyn RewardScorer,
    scheme: &RewardScheme,
    eval_set: &[CorpusRecord],
) -> Result<PolicyEval, TrainError> {
    if eval_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut details = Vec::with_capacity(eval_set.len());
    for rec in eval_set {
        let prompt = prompt_tokens(&rec.prompt)?;
        let max_new = policy.cfg.context.saturating_sub(prompt.len());
        let mut rng = Rng::new(0);
        let out = sample(policy, &prompt, 0.0, max_new, EOS, &mut rng)?;
        let parsed = crate::task::parse_generation(&out.tokens, out.hit_eos);
        let seed_value = rec.steps.first().map(|s| s.lhs).unwrap_or(0);
        let labels = crate::task::generated_step_labels(seed_value, &parsed.steps);

        let (kl_sum, aggregate) = if out.tokens.is_empty() {
            (0.0, 0.0)
        } else {
            let mut tokens = prompt.clone();
            tokens.extend_from_slice(&out.tokens);
            let ref_lp = sequence_logprobs(reference, &tokens, prompt.len())?;
            let kl = kl_per_token(&out.logprobs, &ref_lp)?;
            let seq = TokenSeq {
                step_ends: detect_step_ends(&tokens, prompt.len()),
                prompt_len: prompt.len(),
                terminal: tokens.len() - 1,
                tokens,
            };
            let orm = scorer.orm_score(&seq)?;
            let prm = scorer.prm_scores(&seq)?;
            let shaped = shape_rewards(scheme, &kl, orm, &prm)?;
            (kl.iter().sum::<f64>(), shaped.aggregate_post_clip)
        };

        details.push(PromptEval {
            seed: rec.seed,
            family: rec.family,
            answer_correct: parsed.final_answer == Some(rec.final_answer),
            well_formed: parsed.well_formed,
            steps_total: labels.len(),
            steps_correct: labels.iter().filter(|&&l| l).count(),
            response_tokens: out.tokens.len(),
            kl_sum,
            aggregate_post_clip: aggregate,
        });
    }
    Ok(aggregate_policy_eval(details))
}

/// Fold per-prompt records into the table-level metrics.
pub fn aggregate_policy_eval(details: Vec<PromptEval>) -> PolicyEval {
    let n = details.len();
    let correct = details.iter().filter(|d| d.answer_correct).count();
    let well_formed = details.iter().filter(|d| d.well_formed).count();
    let steps_total: usize = details.iter().map(|d| d.steps_total).sum();
    let steps_correct: usize = details.iter().map(|d| d.steps_correct).sum();
    let kl_tokens: usize = details.iter().map(|d| d.response_tokens).sum();
    let kl_sum: f64 = details.iter().map(|d| d.kl_sum).sum();
    let agg_sum: f64 = details.iter().map(|d| d.aggregate_post_clip).sum();
    let scored = details.iter().filter(|d| d.response_tokens > 0).count();
    PolicyEval {
        accuracy: EvalMetrics {
            final_answer_accuracy: correct as f64 / n as f64,
            well_formed_rate: well_formed as f64 / n as f64,
            step_correctness: if steps_total == 0 {
                0.0
            } else {
                steps_correct as f64 / steps_total as f64
            },
            n_prompts: n,
        },
        mean_kl: if kl_tokens == 0 {
            0.0
        } else {
            kl_sum / kl_tokens as f64
        },
        mean_aggregate: if scored == 0 {
            0.0
        } else {
            agg_sum / scored as f64
        },
        details,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::reward::SchemeKind;
    use crate::task::Vocabulary;

    fn tiny(seed: u64) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                vocab: Vocabulary::size(),
                dim: 12,
                blocks: 1,
                heads: 2,
                context: 64,
            },
            seed,
        )
    }

    #[test]
    fn gae_length_one_is_terminal_case() {
        let (a, r) = compute_gae(&[0.7], &[0.2], 1.0, 0.95).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15);
        assert!((r[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn gae_hand_recursion_zero_deltas() {
        // gamma=1, lambda=0.95, r=[0,0,0.5], V=[0.5,0.5,0.5]:
        // delta = [0+0.5-0.5, 0+0.5-0.5, 0.5+0-0.5] = [0,0,0] -> A = [0,0,0]
        let (a, r) = compute_gae(&[0.0, 0.0, 0.5], &[0.5, 0.5, 0.5], 1.0, 0.95).unwrap();
        for (x, v) in a.iter().zip([0.0, 0.0, 0.0]) {
            assert!((x - v).abs() < 1e-15);
        }
        assert_eq!(r, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn gae_lambda_one_telescopes_to_reward_to_go() {
        let rewards = [0.3, -0.2, 0.9, 0.1];
        let values = [0.25, -0.5, 0.75, 0.4];
        let (a, _) = compute_gae(&rewards, &values, 1.0, 1.0).unwrap();
        for t in 0..rewards.len() {
            let direct: f64 = rewards[t..].iter().sum::<f64>() - values[t];
            assert!((a[t] - direct).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn gae_matches_direct_weighted_sum_oracle() {
        // O(T^2) direct definition: A_t = sum_s (gamma*lambda)^(s-t) delta_s
        let mut rng = Rng::new(123);
        for _ in 0..200 {
            let n = 1 + rng.index(12);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gauss()).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.gauss()).collect();
            let gamma = 0.9 + 0.1 * rng.uniform();
            let lambda = rng.uniform();
            let (a, r) = compute_gae(&rewards, &values, gamma, lambda).unwrap();
            for t in 0..n {
                let mut direct = 0.0;
                for s in t..n {
                    let next_v = if s + 1 < n { values[s + 1] } else { 0.0 };
                    let delta = rewards[s] + gamma * next_v - values[s];
                    direct += (gamma * lambda).powi((s - t) as i32) * delta;
                }
                assert!((a[t] - direct).abs() < 1e-10);
                assert!((r[t] - (a[t] + values[t])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn actor_loss_hand_values() {
        // new = old -> rho = 1 -> loss = -mean(A)
        let lp = [-0.5, -1.0, -2.0];
        let adv = [0.3, -0.7, 1.1];
        let loss = ppo_actor_loss(&lp, &lp, &adv, 0.2).unwrap();
        let mean_a = adv.iter().sum::<f64>() / 3.0;
        assert!((loss + mean_a).abs() < 1e-12);

        // rho = 1.5, eps = 0.2, A = +1 -> contribution -1.2
        let loss = ppo_actor_loss(&[1.5f64.ln()], &[0.0], &[1.0], 0.2).unwrap();
        assert!((loss + 1.2).abs() < 1e-12);

        // rho = 0.5, eps = 0.2, A = -1 -> contribution +0.8
        let loss = ppo_actor_loss(&[0.5f64.ln()], &[0.0], &[-1.0], 0.2).unwrap();
        assert!((loss - 0.8).abs() < 1e-12);
    }

    #[test]
    fn critic_loss_hand_values() {
        // V_new = R within the clip band -> 0
        let loss = ppo_critic_loss(&[1.0, 2.0], &[1.1, 1.9], &[1.0, 2.0], 0.2).unwrap();
        assert!(loss < 1e-15);
        // drifted beyond the band: clipped branch dominates
        let vo = [0.0];
        let vn = [1.0]; // clips to 0.2
        let r = [1.0];
        let loss = ppo_critic_loss(&vn, &vo, &r, 0.2).unwrap();
        // max((1-1)^2, (0.2-1)^2)/2 = 0.32
        assert!((loss - 0.32).abs() < 1e-12);
    }

    #[test]
    fn whiten_normalizes() {
        let mut xs: Vec<f64> = (0..64).map(|i| (i as f64) * 0.37 - 3.0).collect();
        whiten(&mut xs);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn critic_init_requires_orm_checkpoint() {
        let params = tiny(3);
        let bad = Checkpoint::new(Objective::Prm, params.clone());
        assert!(matches!(
            init_critic_from_orm(&bad),
            Err(NnError::ObjectiveMismatch { .. })
        ));
        let good = Checkpoint::new(Objective::Orm, params.clone());
        let critic = init_critic_from_orm(&good).unwrap();
        // backbone bit-equal
        assert_eq!(critic.embed.data, params.embed.data);
        assert_eq!(critic.blocks[0].wq.data, params.blocks[0].wq.data);
        // value head = clean column - misstep column
        for r in 0..params.cfg.dim {
            let expect = params.cls_head.at(r, 1) - params.cls_head.at(r, 0);
            assert_eq!(critic.value_head.data[r], expect);
        }
    }

    #[test]
    fn critic_value_at_terminal_is_orm_logit_diff() {
        let params = tiny(5);
        let ckpt = Checkpoint::new(Objective::Orm, params.clone());
        let critic = init_critic_from_orm(&ckpt).unwrap();
        for seed in 0..10u64 {
            let p = crate::task::generate_problem(crate::task::Family::Simple, seed);
            let s = crate::task::solve_reference(&p);
            let seq = crate::task::encode(&p, &s).unwrap();
            let orm_p = score_orm(&params, &seq).unwrap();
            let v = crate::model::forward(&critic, &seq.tokens, Head::Value).unwrap();
            let v_n = v.at(seq.terminal, 0);
            let logit = (orm_p / (1.0 - orm_p)).ln();
            assert!(
                (v_n - logit).abs() < 1e-9,
                "value {v_n} vs logit(p_clean) {logit}"
            );
        }
    }

    #[test]
    fn identical_policy_and_reference_gives_zero_kl() {
        let params = tiny(7);
        let scheme = RewardScheme::new(SchemeKind::Orm);
        let cfg = PpoConfig {
            rollout_batch: 2,
            max_new: 12,
            ..Default::default()
        };
        let prompts =
            vec![crate::task::prompt_tokens("3 + 4 ?").unwrap(), crate::task::prompt_tokens("5 - 1 ?").unwrap()];
        let mut rng = Rng::new(1);
        let (trajs, dropped) = collect_rollouts(
            &params,
            &params,
            &params,
            &ConstScorer(0.5),
            &scheme,
            &prompts,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(dropped, 0);
        for t in &trajs {
            for (p, r) in t.policy_logprobs.iter().zip(&t.ref_logprobs) {
                assert!((p - r).abs() < 1e-9, "kl estimate must vanish");
            }
            t.validate().unwrap();
        }
    }

    #[test]
    fn rollouts_deterministic_under_seed() {
        let policy = tiny(11);
        let scheme = RewardScheme::new(SchemeKind::PrmAvg);
        let cfg = PpoConfig {
            rollout_batch: 3,
            max_new: 16,
            ..Default::default()
        };
        let prompts = vec![crate::task::prompt_tokens("7 + 5 ; * 2 ?").unwrap()];
        let run = || {
            let mut rng = Rng::new(42);
            collect_rollouts(
                &policy,
                &policy,
                &policy,
                &ConstScorer(0.3),
                &scheme,
                &prompts,
                &cfg,
                &mut rng,
            )
            .unwrap()
            .0
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.policy_logprobs, y.policy_logprobs);
            assert_eq!(x.rewards.per_token, y.rewards.per_token);
        }
    }

    #[test]
    fn graph_losses_match_pure_functions() {
        let policy = tiny(13);
        let scheme = RewardScheme::new(SchemeKind::Orm);
        let cfg = PpoConfig {
            rollout_batch: 2,
            max_new: 10,
            ..Default::default()
        };
        let prompts = vec![crate::task::prompt_tokens("9 - 2 ?").unwrap()];
        let mut rng = Rng::new(3);
        let (trajs, _) = collect_rollouts(
            &policy,
            &policy,
            &policy,
            &ConstScorer(0.4),
            &scheme,
            &prompts,
            &cfg,
            &mut rng,
        )
        .unwrap();
        let batch: Vec<&Trajectory> = trajs.iter().collect();

        let mut g = Graph::new();
        let gm = GraphModel::bind_frozen(&mut g, &policy);
        let actor = actor_loss_node(&mut g, &gm, &batch, 0.2).unwrap();
        let actor_graph = g.value(actor).item();
        // pure: new logprobs equal collection-time logprobs (same policy)
        let mut new_lp = Vec::new();
        let mut old_lp = Vec::new();
        let mut adv = Vec::new();
        for t in &batch {
            new_lp.extend_from_slice(&t.policy_logprobs);
            old_lp.extend_from_slice(&t.policy_logprobs);
            adv.extend_from_slice(&t.advantages);
        }
        let actor_pure = ppo_actor_loss(&new_lp, &old_lp, &adv, 0.2).unwrap();
        assert!(
            (actor_graph - actor_pure).abs() < 1e-9,
            "{actor_graph} vs {actor_pure}"
        );

        let mut g = Graph::new();
        let gm = GraphModel::bind_frozen(&mut g, &policy);
        let critic = critic_loss_node(&mut g, &gm, &batch, 0.2).unwrap();
        let critic_graph = g.value(critic).item();
        let mut vn = Vec::new();
        let mut vo = Vec::new();
        let mut rets = Vec::new();
        for t in &batch {
            vn.extend_from_slice(&t.values);
            vo.extend_from_slice(&t.values);
            rets.extend_from_slice(&t.returns);
        }
        let critic_pure = ppo_critic_loss(&vn, &vo, &rets, 0.2).unwrap();
        assert!(
            (critic_graph - critic_pure).abs() < 1e-9,
            "{critic_graph} vs {critic_pure}"
        );
    }

    #[test]
    fn actor_gradient_matches_vanilla_policy_gradient_at_eps_infinity() {
        let policy = tiny(17);
        let scheme = RewardScheme::new(SchemeKind::Orm);
        let cfg = PpoConfig {
            rollout_batch: 2,
            max_new: 8,
            ..Default::default()
        };
        let prompts = vec![crate::task::prompt_tokens("4 + 4 ?").unwrap()];
        let mut rng = Rng::new(5);
        let (trajs, _) = collect_rollouts(
            &policy,
            &policy,
            &policy,
            &ConstScorer(0.2),
            &scheme,
            &prompts,
            &cfg,
            &mut rng,
        )
        .unwrap();
        let batch: Vec<&Trajectory> = trajs.iter().collect();

        // clipped objective with huge eps
        let mut g1 = Graph::new();
        let gm1 = GraphModel::bind(&mut g1, &policy);
        let loss1 = actor_loss_node(&mut g1, &gm1, &batch, 1e9).unwrap();
        g1.backward(loss1).unwrap();
        let grads1 = gm1.grads(&g1);

        // vanilla policy gradient: -mean(new_lp * A)
        let mut g2 = Graph::new();
        let gm2 = GraphModel::bind(&mut g2, &policy);
        let mut sums = Vec::new();
        let mut total = 0usize;
        for t in &batch {
            let m = t.response_len();
            let new_lp = new_logprobs_node(&mut g2, &gm2, t).unwrap();
            let adv = g2.constant(Tensor::from_vec(m, 1, t.advantages.clone()));
            let w = g2.mul(new_lp, adv);
            sums.push(g2.sum(w));
            total += m;
        }
        let mut acc = sums[0];
        for &s in &sums[1..] {
            acc = g2.add(acc, s);
        }
        let loss2 = g2.scale(acc, -1.0 / total as f64);
        g2.backward(loss2).unwrap();
        let grads2 = gm2.grads(&g2);

        for (a, b) in grads1.iter().zip(&grads2) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn scheme_switch_changes_only_terminal_reward() {
        // with a constant-score reward model, all five schemes produce
        // identical trajectories except r_n
        let policy = tiny(19);
        let cfg = PpoConfig {
            rollout_batch: 2,
            max_new: 14,
            ..Default::default()
        };
        let prompts = vec![crate::task::prompt_tokens("8 + 1 ; * 2 ?").unwrap()];
        let mut base: Option<Vec<Trajectory>> = None;
        for kind in SchemeKind::all() {
            let scheme = RewardScheme::new(kind);
            let mut rng = Rng::new(7);
            let (trajs, _) = collect_rollouts(
                &policy,
                &policy,
                &policy,
                &ConstScorer(0.6),
                &scheme,
                &prompts,
                &cfg,
                &mut rng,
            )
            .unwrap();
            match &base {
                None => base = Some(trajs),
                Some(first) => {
                    for (a, b) in first.iter().zip(&trajs) {
                        assert_eq!(a.tokens, b.tokens);
                        assert_eq!(a.policy_logprobs, b.policy_logprobs);
                        assert_eq!(a.values, b.values);
                        let n = a.rewards.per_token.len();
                        assert_eq!(
                            a.rewards.per_token[..n - 1],
                            b.rewards.per_token[..n - 1]
                        );
                    }
                }
            }
        }
    }
}

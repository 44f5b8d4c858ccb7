//! Outcome- and process-supervised reward models.
//!
//! Both reuse the generator backbone with the two-class head. The outcome
//! model (ORM) is scored only at the terminal token: its label says whether
//! the solution contains any incorrect step. The process model (PRM) is
//! scored at every step-end index in S; all other positions are masked out of
//! the loss entirely, so their logits carry exactly zero gradient.
//!
//! Class convention everywhere: index 0 = incorrect/has-misstep, index 1 =
//! correct/clean. Scores are always probability-of-correct.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, Objective};
use crate::error::TrainError;
use crate::graph::{Graph, NodeId};
use crate::metrics::MetricsSink;
use crate::model::{forward, GraphModel, Head, ModelParams};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng::{derive_seed, Rng};
use crate::task::{CorpusRecord, TokenSeq};
use crate::tensor::{softmax_row, Tensor};

pub const CLASS_INCORRECT: usize = 0;
pub const CLASS_CORRECT: usize = 1;

/// One reward-model training example.
#[derive(Debug, Clone)]
pub struct RmExample {
    pub tokens: TokenSeq,
    /// One label per index in `tokens.step_ends`; true = step correct.
    pub step_labels: Vec<bool>,
    /// Sequence-level label; true = clean (no misstep anywhere).
    pub clean: bool,
}

impl RmExample {
    pub fn from_record(rec: &CorpusRecord) -> Result<Self, TrainError> {
        let tokens = rec.token_seq()?;
        // the answer terminator is a step: its label is answer correctness
        let mut step_labels = rec.step_labels.clone();
        step_labels.push(rec.answer_correct);
        assert_eq!(step_labels.len(), tokens.step_ends.len());
        let clean = step_labels.iter().all(|&l| l);
        Ok(Self {
            tokens,
            step_labels,
            clean,
        })
    }
}

/// Per-step probabilities of correctness, aligned to the step set S, plus the
/// sequence-level probability of a clean solution.
#[derive(Debug, Clone, PartialEq)]
pub struct StepScores {
    pub per_step: Vec<f64>,
    pub sequence: f64,
}

impl StepScores {
    /// Flagged when the scored sequence had no detectable step boundaries;
    /// the reward-delivery fallback policy decides what to do.
    pub fn is_empty(&self) -> bool {
        self.per_step.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn one_hot_class(correct: bool) -> usize {
    if correct {
        CLASS_CORRECT
    } else {
        CLASS_INCORRECT
    }
}

/// Two-class cross-entropy at the terminal index only.
pub fn orm_loss_from_logits(cls_logits: &Tensor, ex: &RmExample) -> f64 {
    let row = cls_logits.row(ex.tokens.terminal);
    let mut logp = [0.0; 2];
    crate::tensor::log_softmax_row(row, &mut logp);
    -logp[one_hot_class(ex.clean)]
}

/// Eq-style masked step loss: mean over S of two-class cross-entropy at each
/// step-end index; positions outside S contribute exactly zero.
pub fn prm_loss_from_logits(cls_logits: &Tensor, ex: &RmExample) -> Result<f64, TrainError> {
    if ex.tokens.step_ends.is_empty() {
        return Err(TrainError::EmptyStepScores);
    }
    let mut total = 0.0;
    let mut logp = [0.0; 2];
    for (&idx, &label) in ex.tokens.step_ends.iter().zip(&ex.step_labels) {
        crate::tensor::log_softmax_row(cls_logits.row(idx), &mut logp);
        total += -logp[one_hot_class(label)];
    }
    Ok(total / ex.tokens.step_ends.len() as f64)
}

/// Graph version of `orm_loss_from_logits` on an existing `[T x 2]` node.
pub fn orm_loss_node(g: &mut Graph, cls_logits: NodeId, ex: &RmExample) -> NodeId {
    let at_terminal = g.gather_rows(cls_logits, vec![ex.tokens.terminal]);
    let logp = g.log_softmax_rows(at_terminal);
    let picked = g.pick_per_row(logp, vec![one_hot_class(ex.clean)]);
    let s = g.sum(picked);
    g.neg(s)
}

/// Graph version of `prm_loss_from_logits` on an existing `[T x 2]` node.
pub fn prm_loss_node(
    g: &mut Graph,
    cls_logits: NodeId,
    ex: &RmExample,
) -> Result<NodeId, TrainError> {
    if ex.tokens.step_ends.is_empty() {
        return Err(TrainError::EmptyStepScores);
    }
    let at_steps = g.gather_rows(cls_logits, ex.tokens.step_ends.clone());
    let logp = g.log_softmax_rows(at_steps);
    let classes: Vec<usize> = ex.step_labels.iter().map(|&l| one_hot_class(l)).collect();
    let picked = g.pick_per_row(logp, classes);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / ex.tokens.step_ends.len() as f64))
}

pub fn orm_loss(params: &ModelParams, ex: &RmExample) -> Result<f64, TrainError> {
    let logits = forward(params, &ex.tokens.tokens, Head::Classifier)?;
    Ok(orm_loss_from_logits(&logits, ex))
}

pub fn prm_loss(params: &ModelParams, ex: &RmExample) -> Result<f64, TrainError> {
    let logits = forward(params, &ex.tokens.tokens, Head::Classifier)?;
    prm_loss_from_logits(&logits, ex)
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

fn class_probs(logits_row: &[f64]) -> [f64; 2] {
    let mut p = [0.0; 2];
    softmax_row(logits_row, &mut p);
    p
}

/// Probability that the solution is clean, read at the terminal index.
pub fn score_orm(params: &ModelParams, seq: &TokenSeq) -> Result<f64, TrainError> {
    let logits = forward(params, &seq.tokens, Head::Classifier)?;
    Ok(class_probs(logits.row(seq.terminal))[CLASS_CORRECT])
}

/// Probability of correctness at every index in S. Empty (with the
/// `is_empty` flag up) when the sequence has no step boundaries.
pub fn score_prm(params: &ModelParams, seq: &TokenSeq) -> Result<StepScores, TrainError> {
    let logits = forward(params, &seq.tokens, Head::Classifier)?;
    let per_step = seq
        .step_ends
        .iter()
        .map(|&i| class_probs(logits.row(i))[CLASS_CORRECT])
        .collect();
    Ok(StepScores {
        per_step,
        sequence: class_probs(logits.row(seq.terminal))[CLASS_CORRECT],
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmObjective {
    Orm,
    Prm,
}

impl RmObjective {
    pub fn as_str(&self) -> &'static str {
        match self {
            RmObjective::Orm => "orm",
            RmObjective::Prm => "prm",
        }
    }

    pub fn checkpoint_objective(&self) -> Objective {
        match self {
            RmObjective::Orm => Objective::Orm,
            RmObjective::Prm => Objective::Prm,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmEval {
    pub accuracy: f64,
    pub auc: f64,
    pub mean_loss: f64,
}

/// Rank-based AUC (Mann-Whitney) of `score` separating positives from
/// negatives; ties get average ranks.
pub fn auc(scores: &[(f64, bool)]) -> f64 {
    let n_pos = scores.iter().filter(|(_, l)| *l).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // ranks are 1-based; tied block shares the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for item in &sorted[i..=j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Held-out evaluation. ORM: sequence-level accuracy/AUC of p(clean).
/// PRM: step-level accuracy/AUC of p(correct) over every index in S.
pub fn evaluate_rm(
    params: &ModelParams,
    objective: RmObjective,
    examples: &[RmExample],
) -> Result<RmEval, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut scores: Vec<(f64, bool)> = Vec::new();
    let mut loss_total = 0.0;
    for ex in examples {
        match objective {
            RmObjective::Orm => {
                let p = score_orm(params, &ex.tokens)?;
                scores.push((p, ex.clean));
                loss_total += orm_loss(params, ex)?;
            }
            RmObjective::Prm => {
                let s = score_prm(params, &ex.tokens)?;
                for (p, &l) in s.per_step.iter().zip(&ex.step_labels) {
                    scores.push((*p, l));
                }
                loss_total += prm_loss(params, ex)?;
            }
        }
    }
    let correct = scores
        .iter()
        .filter(|(p, l)| (*p > 0.5) == *l)
        .count();
    Ok(RmEval {
        accuracy: correct as f64 / scores.len() as f64,
        auc: auc(&scores),
        mean_loss: loss_total / examples.len() as f64,
    })
}

fn batch_loss_node(
    g: &mut Graph,
    gm: &GraphModel,
    objective: RmObjective,
    batch: &[&RmExample],
) -> Result<NodeId, TrainError> {
    let mut per_ex = Vec::with_capacity(batch.len());
    for ex in batch {
        let logits = gm.forward(g, &ex.tokens.tokens, Head::Classifier)?;
        let node = match objective {
            RmObjective::Orm => orm_loss_node(g, logits, ex),
            RmObjective::Prm => prm_loss_node(g, logits, ex)?,
        };
        per_ex.push(node);
    }
    let mut acc = per_ex[0];
    for &n in &per_ex[1..] {
        acc = g.add(acc, n);
    }
    Ok(g.scale(acc, 1.0 / batch.len() as f64))
}

/// Train a reward model on the given objective. Requires both classes in the
/// training corpus; keeps the best parameters by held-out AUC.
pub fn train_rm(
    params: ModelParams,
    objective: RmObjective,
    train: &[CorpusRecord],
    val: &[CorpusRecord],
    cfg: &RmConfig,
    metrics: &mut MetricsSink,
    ckpt_path: Option<&Path>,
) -> Result<ModelParams, TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let train_ex: Vec<RmExample> = train
        .iter()
        .map(RmExample::from_record)
        .collect::<Result<_, _>>()?;
    let val_ex: Vec<RmExample> = val
        .iter()
        .map(RmExample::from_record)
        .collect::<Result<_, _>>()?;
    let has_pos = train_ex.iter().any(|e| e.clean);
    let has_neg = train_ex.iter().any(|e| !e.clean);
    if !(has_pos && has_neg) {
        return Err(TrainError::SingleClassCorpus);
    }

    let stage = objective.as_str();
    let steps_per_epoch = train_ex.len().div_ceil(cfg.batch_size);
    let horizon = steps_per_epoch * cfg.epochs;
    let mut opt = OptimizerState::new(
        &params,
        OptimizerConfig {
            base_lr: cfg.base_lr,
            weight_decay: cfg.weight_decay,
            horizon,
            ..OptimizerConfig::new(cfg.base_lr, horizon)
        },
    );
    let mut params = params;
    let mut rng = Rng::new(derive_seed(cfg.seed, 0x12 + objective as u64));

    let initial = evaluate_rm(&params, objective, &val_ex)?;
    metrics.log(stage, 0, "val", "accuracy", initial.accuracy);
    metrics.log(stage, 0, "val", "auc", initial.auc);
    let mut best_auc = initial.auc;
    let mut best_params = params.clone();
    let persist = |p: &ModelParams| -> Result<(), TrainError> {
        if let Some(path) = ckpt_path {
            checkpoint::save(
                path,
                &Checkpoint::new(objective.checkpoint_objective(), p.clone()),
            )?;
        }
        Ok(())
    };
    persist(&best_params)?;

    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&RmExample> = chunk.iter().map(|&i| &train_ex[i]).collect();
            let mut g = Graph::new();
            let gm = GraphModel::bind(&mut g, &params);
            let loss = batch_loss_node(&mut g, &gm, objective, &batch)?;
            let loss_v = g.value(loss).item();
            if !loss_v.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    detail: format!("{stage} loss {loss_v}"),
                });
            }
            g.backward(loss)?;
            let grads = gm.grads(&g);
            opt.apply(&mut params, &grads)?;
            epoch_loss += loss_v;
            n_batches += 1.0;
            step += 1;
        }
        metrics.log(stage, epoch, "train", "loss", epoch_loss / n_batches);
        let eval = evaluate_rm(&params, objective, &val_ex)?;
        metrics.log(stage, epoch, "val", "accuracy", eval.accuracy);
        metrics.log(stage, epoch, "val", "auc", eval.auc);
        metrics.log(stage, epoch, "val", "loss", eval.mean_loss);
        if eval.auc > best_auc {
            best_auc = eval.auc;
            best_params = params.clone();
            persist(&best_params)?;
        }
    }
    Ok(best_params)
}

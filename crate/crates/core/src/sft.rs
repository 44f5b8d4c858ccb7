//! Supervised fine-tuning of the generator on correct step-by-step solutions.
//!
//! The loss is next-token NLL over solution tokens only: prompt positions and
//! padding carry a zero mask. The trained model doubles later as the frozen
//! KL reference ("SFT Base") and the PPO policy initialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, Objective};
use crate::error::TrainError;
use crate::graph::{Graph, NodeId};
use crate::metrics::MetricsSink;
use crate::model::{sample, GraphModel, ModelParams};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng::{derive_seed, Rng};
use crate::task::{
    self, generated_step_labels, parse_generation, prompt_tokens, CorpusRecord, PAD,
};
use crate::tensor::Tensor;

/// Padded token sequences with a per-position loss mask.
///
/// `mask[b][t] = 1` exactly when `tokens[b][t]` is a solution token (a target
/// the loss should score); prompt positions and padding are 0.
#[derive(Debug, Clone)]
pub struct SftBatch {
    pub tokens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<f64>>,
    /// Unpadded lengths, so compute can skip padding.
    pub lens: Vec<usize>,
}

impl SftBatch {
    pub fn from_records(records: &[&CorpusRecord]) -> Result<Self, TrainError> {
        let seqs: Vec<task::TokenSeq> = records
            .iter()
            .map(|r| r.token_seq())
            .collect::<Result<_, _>>()?;
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        for seq in &seqs {
            let mut toks = seq.tokens.clone();
            let mut m = vec![0.0; width];
            // solution tokens run from prompt_len through the terminal EOS
            m[seq.prompt_len..=seq.terminal].fill(1.0);
            lens.push(toks.len());
            toks.resize(width, PAD);
            tokens.push(toks);
            mask.push(m);
        }
        Ok(Self { tokens, mask, lens })
    }
}

/// Masked next-token NLL as a graph node: mean over masked positions of
/// -log p(tokens[t] | tokens[..t]).
pub fn sft_loss_node(
    g: &mut Graph,
    gm: &GraphModel,
    batch: &SftBatch,
) -> Result<NodeId, TrainError> {
    let mut per_seq = Vec::new();
    let mut total_weight = 0.0;
    for (b, toks) in batch.tokens.iter().enumerate() {
        let len = batch.lens[b];
        let toks = &toks[..len];
        // positions 0..len-1 predict targets 1..len
        let logits = gm.forward(g, &toks[..len - 1], crate::model::Head::Lm)?;
        let logp = g.log_softmax_rows(logits);
        let targets: Vec<usize> = toks[1..len].to_vec();
        let picked = g.pick_per_row(logp, targets);
        // weight by the mask of the *target* position
        let w: Vec<f64> = (1..len).map(|t| batch.mask[b][t]).collect();
        total_weight += w.iter().sum::<f64>();
        let wnode = g.constant(Tensor::from_vec(len - 1, 1, w));
        let weighted = g.mul(picked, wnode);
        per_seq.push(g.sum(weighted));
    }
    if total_weight == 0.0 {
        return Err(TrainError::EmptyMask);
    }
    let mut acc = per_seq[0];
    for &s in &per_seq[1..] {
        acc = g.add(acc, s);
    }
    Ok(g.scale(acc, -1.0 / total_weight))
}

/// Masked next-token NLL without gradient bookkeeping.
pub fn sft_loss(params: &ModelParams, batch: &SftBatch) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let gm = GraphModel::bind_frozen(&mut g, params);
    let node = sft_loss_node(&mut g, &gm, batch)?;
    Ok(g.value(node).item())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Mean held-out loss computed in mini-batches.
pub fn held_out_loss(
    params: &ModelParams,
    records: &[CorpusRecord],
    batch_size: usize,
) -> Result<f64, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&CorpusRecord> = chunk.iter().collect();
        let batch = SftBatch::from_records(&refs)?;
        // weight chunk losses by masked-position count so the aggregate is a
        // true mean over positions
        let weight: f64 = batch.mask.iter().flatten().sum();
        total += sft_loss(params, &batch)? * weight;
        count += weight;
    }
    Ok(total / count)
}

/// Train with the configured epochs; keeps the best parameters by held-out
/// loss and (optionally) persists them as a generator checkpoint.
///
/// A non-finite loss aborts with `TrainError::Diverged`; the best checkpoint
/// written so far stays on disk.
pub fn train_sft(
    params: ModelParams,
    train: &[CorpusRecord],
    val: &[CorpusRecord],
    cfg: &SftConfig,
    metrics: &mut MetricsSink,
    ckpt_path: Option<&Path>,
) -> Result<ModelParams, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
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
    let mut rng = Rng::new(derive_seed(cfg.seed, 0x5f7));

    let initial_val = held_out_loss(&params, val, cfg.batch_size)?;
    metrics.log("sft", 0, "val", "loss", initial_val);
    let mut best_val = initial_val;
    let mut best_params = params.clone();
    let persist = |p: &ModelParams| -> Result<(), TrainError> {
        if let Some(path) = ckpt_path {
            checkpoint::save(path, &Checkpoint::new(Objective::Generator, p.clone()))?;
        }
        Ok(())
    };
    persist(&best_params)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&CorpusRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = SftBatch::from_records(&refs)?;
            let mut g = Graph::new();
            let gm = GraphModel::bind(&mut g, &params);
            let loss = sft_loss_node(&mut g, &gm, &batch)?;
            let loss_v = g.value(loss).item();
            if !loss_v.is_finite() {
                return Err(TrainError::Diverged {
                    step: global_step,
                    detail: format!("sft loss {loss_v}"),
                });
            }
            g.backward(loss)?;
            let grads = gm.grads(&g);
            opt.apply(&mut params, &grads)?;
            let w: f64 = batch.mask.iter().flatten().sum();
            epoch_loss += loss_v * w;
            epoch_weight += w;
            global_step += 1;
        }
        metrics.log("sft", epoch, "train", "loss", epoch_loss / epoch_weight);
        let val_loss = held_out_loss(&params, val, cfg.batch_size)?;
        metrics.log("sft", epoch, "val", "loss", val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            persist(&best_params)?;
        }
    }
    Ok(best_params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EvalMetrics {
    /// Exact integer match of the generated '#answer' against the oracle.
    pub final_answer_accuracy: f64,
    /// Fraction of generations matching `step;...;#answer` + EOS.
    pub well_formed_rate: f64,
    /// Oracle correctness rate over all generated steps (micro-average).
    pub step_correctness: f64,
    pub n_prompts: usize,
}

/// Greedy-decode each eval prompt and score against the oracle.
///
/// Malformed generations count as wrong answers; they are visible in the
/// well-formedness rate rather than raised as errors.
pub fn eval_accuracy(
    params: &ModelParams,
    eval_set: &[CorpusRecord],
    mode: DecodeMode,
) -> Result<EvalMetrics, TrainError> {
    if eval_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut correct = 0usize;
    let mut well_formed = 0usize;
    let mut steps_total = 0usize;
    let mut steps_right = 0usize;
    for (i, rec) in eval_set.iter().enumerate() {
        let prompt = prompt_tokens(&rec.prompt)?;
        let max_new = params.cfg.context.saturating_sub(prompt.len());
        let out = match mode {
            DecodeMode::Greedy => {
                let mut rng = Rng::new(0);
                sample(params, &prompt, 0.0, max_new, task::EOS, &mut rng)?
            }
            DecodeMode::Sample { temperature, seed } => {
                let mut rng = Rng::new(derive_seed(seed, i as u64));
                sample(params, &prompt, temperature, max_new, task::EOS, &mut rng)?
            }
        };
        let parsed = parse_generation(&out.tokens, out.hit_eos);
        if parsed.well_formed {
            well_formed += 1;
        }
        if parsed.final_answer == Some(rec.final_answer) {
            correct += 1;
        }
        // eval records hold oracle solutions, so steps[0].lhs is the seed
        let seed_value = rec.steps.first().map(|s| s.lhs).unwrap_or(0);
        let labels = generated_step_labels(seed_value, &parsed.steps);
        steps_total += labels.len();
        steps_right += labels.iter().filter(|&&l| l).count();
    }
    let n = eval_set.len();
    Ok(EvalMetrics {
        final_answer_accuracy: correct as f64 / n as f64,
        well_formed_rate: well_formed as f64 / n as f64,
        step_correctness: if steps_total == 0 {
            0.0
        } else {
            steps_right as f64 / steps_total as f64
        },
        n_prompts: n,
    })
}

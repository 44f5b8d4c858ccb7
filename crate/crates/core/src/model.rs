//! Minimal autoregressive transformer with interchangeable heads.
//!
//! One backbone (token + position embeddings, pre-norm attention blocks) feeds
//! three heads: a language-model head `[d x V]`, a scalar value head `[d x 1]`
//! and a two-class head `[d x 2]`. Training runs through the autodiff graph;
//! generation runs through an incremental KV-cache path that performs the same
//! arithmetic in the same order, so sampled log-probs agree with graph
//! log-softmax outputs.

use crate::error::NnError;
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::{dot, log_softmax_row, softmax_row, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub context: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !self.dim.is_multiple_of(self.heads) {
            return Err(NnError::Checkpoint(format!(
                "head count {} must divide width {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Lm,
    Value,
    Classifier,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lm_head: Tensor,
    pub value_head: Tensor,
    pub cls_head: Tensor,
}

impl ModelParams {
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut rng = Rng::new(seed);
        let d = cfg.dim;
        let std = 0.02;
        // residual-branch projections get downscaled init for stability
        let res_std = std / (2.0 * cfg.blocks as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                wq: Tensor::randn(d, d, std, &mut rng),
                wk: Tensor::randn(d, d, std, &mut rng),
                wv: Tensor::randn(d, d, std, &mut rng),
                wo: Tensor::randn(d, d, res_std, &mut rng),
                w1: Tensor::randn(d, 4 * d, std, &mut rng),
                w2: Tensor::randn(4 * d, d, res_std, &mut rng),
                ln1_gain: Tensor::full(1, d, 1.0),
                ln1_bias: Tensor::zeros(1, d),
                ln2_gain: Tensor::full(1, d, 1.0),
                ln2_bias: Tensor::zeros(1, d),
            })
            .collect();
        Self {
            cfg,
            embed: Tensor::randn(cfg.vocab, d, std, &mut rng),
            pos: Tensor::randn(cfg.context, d, std, &mut rng),
            blocks,
            lm_head: Tensor::randn(d, cfg.vocab, std, &mut rng),
            value_head: Tensor::randn(d, 1, std, &mut rng),
            cls_head: Tensor::randn(d, 2, std, &mut rng),
        }
    }

    /// Parameters in a fixed order; the same order is used by the optimizer,
    /// gradient extraction, and the checkpoint container.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.wq"), &b.wq));
            out.push((format!("block{i}.wk"), &b.wk));
            out.push((format!("block{i}.wv"), &b.wv));
            out.push((format!("block{i}.wo"), &b.wo));
            out.push((format!("block{i}.w1"), &b.w1));
            out.push((format!("block{i}.w2"), &b.w2));
            out.push((format!("block{i}.ln1_gain"), &b.ln1_gain));
            out.push((format!("block{i}.ln1_bias"), &b.ln1_bias));
            out.push((format!("block{i}.ln2_gain"), &b.ln2_gain));
            out.push((format!("block{i}.ln2_bias"), &b.ln2_bias));
        }
        out.push(("lm_head".into(), &self.lm_head));
        out.push(("value_head".into(), &self.value_head));
        out.push(("cls_head".into(), &self.cls_head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed".into(), &mut self.embed),
            ("pos".into(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.wq"), &mut b.wq));
            out.push((format!("block{i}.wk"), &mut b.wk));
            out.push((format!("block{i}.wv"), &mut b.wv));
            out.push((format!("block{i}.wo"), &mut b.wo));
            out.push((format!("block{i}.w1"), &mut b.w1));
            out.push((format!("block{i}.w2"), &mut b.w2));
            out.push((format!("block{i}.ln1_gain"), &mut b.ln1_gain));
            out.push((format!("block{i}.ln1_bias"), &mut b.ln1_bias));
            out.push((format!("block{i}.ln2_gain"), &mut b.ln2_gain));
            out.push((format!("block{i}.ln2_bias"), &mut b.ln2_bias));
        }
        out.push(("lm_head".into(), &mut self.lm_head));
        out.push(("value_head".into(), &mut self.value_head));
        out.push(("cls_head".into(), &mut self.cls_head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.is_finite())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), NnError> {
        if tokens.len() > self.cfg.context {
            return Err(NnError::OverlongSequence {
                len: tokens.len(),
                context: self.cfg.context,
            });
        }
        for &t in tokens {
            if t >= self.cfg.vocab {
                return Err(NnError::OutOfVocab {
                    id: t,
                    vocab: self.cfg.vocab,
                });
            }
        }
        Ok(())
    }
}

/// Model parameters bound into an autodiff graph.
pub struct GraphModel {
    cfg: ModelConfig,
    embed: NodeId,
    pos: NodeId,
    blocks: Vec<BoundBlock>,
    lm_head: NodeId,
    value_head: NodeId,
    cls_head: NodeId,
    param_ids: Vec<NodeId>,
}

struct BoundBlock {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    w1: NodeId,
    w2: NodeId,
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
}

impl GraphModel {
    /// Bind as trainable leaves (gradients accumulate across forwards).
    pub fn bind(g: &mut Graph, params: &ModelParams) -> Self {
        Self::bind_with(g, params, true)
    }

    /// Bind as constants: forward only, no gradient bookkeeping.
    pub fn bind_frozen(g: &mut Graph, params: &ModelParams) -> Self {
        Self::bind_with(g, params, false)
    }

    fn bind_with(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let mut ids = Vec::new();
        let mut put = |g: &mut Graph, t: &Tensor| {
            let id = if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            };
            ids.push(id);
            id
        };
        let embed = put(g, &params.embed);
        let pos = put(g, &params.pos);
        let blocks = params
            .blocks
            .iter()
            .map(|b| BoundBlock {
                wq: put(g, &b.wq),
                wk: put(g, &b.wk),
                wv: put(g, &b.wv),
                wo: put(g, &b.wo),
                w1: put(g, &b.w1),
                w2: put(g, &b.w2),
                ln1_gain: put(g, &b.ln1_gain),
                ln1_bias: put(g, &b.ln1_bias),
                ln2_gain: put(g, &b.ln2_gain),
                ln2_bias: put(g, &b.ln2_bias),
            })
            .collect();
        let lm_head = put(g, &params.lm_head);
        let value_head = put(g, &params.value_head);
        let cls_head = put(g, &params.cls_head);
        Self {
            cfg: params.cfg,
            embed,
            pos,
            blocks,
            lm_head,
            value_head,
            cls_head,
            param_ids: ids,
        }
    }

    /// Backbone hidden states `[T x d]` with causal masking.
    pub fn hidden(&self, g: &mut Graph, tokens: &[usize]) -> Result<NodeId, NnError> {
        if tokens.len() > self.cfg.context {
            return Err(NnError::OverlongSequence {
                len: tokens.len(),
                context: self.cfg.context,
            });
        }
        for &t in tokens {
            if t >= self.cfg.vocab {
                return Err(NnError::OutOfVocab {
                    id: t,
                    vocab: self.cfg.vocab,
                });
            }
        }
        let te = g.gather_rows(self.embed, tokens.to_vec());
        let pe = g.gather_rows(self.pos, (0..tokens.len()).collect());
        let mut x = g.add(te, pe);
        for b in &self.blocks {
            let xn = g.layer_norm(x, b.ln1_gain, b.ln1_bias);
            let q = g.matmul(xn, b.wq);
            let k = g.matmul(xn, b.wk);
            let v = g.matmul(xn, b.wv);
            let att = g.causal_attention(q, k, v, self.cfg.heads);
            let proj = g.matmul(att, b.wo);
            x = g.add(x, proj);
            let xn2 = g.layer_norm(x, b.ln2_gain, b.ln2_bias);
            let h = g.matmul(xn2, b.w1);
            let hg = g.gelu(h);
            let f = g.matmul(hg, b.w2);
            x = g.add(x, f);
        }
        Ok(x)
    }

    /// Project hidden states through the requested head.
    pub fn project(&self, g: &mut Graph, hidden: NodeId, head: Head) -> NodeId {
        let w = match head {
            Head::Lm => self.lm_head,
            Head::Value => self.value_head,
            Head::Classifier => self.cls_head,
        };
        g.matmul(hidden, w)
    }

    pub fn forward(&self, g: &mut Graph, tokens: &[usize], head: Head) -> Result<NodeId, NnError> {
        let h = self.hidden(g, tokens)?;
        Ok(self.project(g, h, head))
    }

    /// Gradients aligned with `ModelParams::params()` order; zeros where a
    /// parameter did not touch the loss.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.param_ids.iter().map(|&id| g.grad(id)).collect()
    }
}

/// Per-position head outputs computed without gradient bookkeeping.
///
/// LM head: logits `[T x V]`; Value head: `[T x 1]`; Classifier: `[T x 2]`.
pub fn forward(params: &ModelParams, tokens: &[usize], head: Head) -> Result<Tensor, NnError> {
    let hidden = hidden_states(params, tokens)?;
    let w = match head {
        Head::Lm => &params.lm_head,
        Head::Value => &params.value_head,
        Head::Classifier => &params.cls_head,
    };
    Ok(Tensor::matmul(&hidden, w))
}

/// Backbone hidden states `[T x d]` via the incremental path.
pub fn hidden_states(params: &ModelParams, tokens: &[usize]) -> Result<Tensor, NnError> {
    params.check_tokens(tokens)?;
    let mut ctx = InferCtx::new(params);
    let mut out = Tensor::zeros(tokens.len(), params.cfg.dim);
    for (i, &tok) in tokens.iter().enumerate() {
        let h = ctx.step(tok);
        out.row_mut(i).copy_from_slice(&h);
    }
    Ok(out)
}

/// Incremental decoder state: per-block KV caches plus the running position.
pub struct InferCtx<'a> {
    params: &'a ModelParams,
    pos: usize,
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
}

impl<'a> InferCtx<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            pos: 0,
            k_cache: vec![Vec::new(); params.cfg.blocks],
            v_cache: vec![Vec::new(); params.cfg.blocks],
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Process one token; returns the final hidden state for this position.
    /// Caller guarantees token id and position are in range.
    fn step(&mut self, token: usize) -> Vec<f64> {
        let p = self.params;
        let d = p.cfg.dim;
        let heads = p.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x: Vec<f64> = p
            .embed
            .row(token)
            .iter()
            .zip(p.pos.row(self.pos))
            .map(|(a, b)| a + b)
            .collect();

        for (bi, b) in p.blocks.iter().enumerate() {
            let xn = ln_row(&x, &b.ln1_gain.data, &b.ln1_bias.data);
            let q = vec_mat(&xn, &b.wq);
            let k = vec_mat(&xn, &b.wk);
            let v = vec_mat(&xn, &b.wv);
            self.k_cache[bi].extend_from_slice(&k);
            self.v_cache[bi].extend_from_slice(&v);
            let t_len = self.pos + 1;

            let mut ho = vec![0.0; d];
            for h in 0..heads {
                let off = h * dh;
                let qs = &q[off..off + dh];
                let mut scores = Vec::with_capacity(t_len);
                for j in 0..t_len {
                    let ks = &self.k_cache[bi][j * d + off..j * d + off + dh];
                    scores.push(dot(qs, ks) * scale);
                }
                let mut probs = vec![0.0; t_len];
                softmax_row(&scores, &mut probs);
                let orow = &mut ho[off..off + dh];
                for (j, &pw) in probs.iter().enumerate() {
                    let vs = &self.v_cache[bi][j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vs) {
                        *o += pw * vv;
                    }
                }
            }
            let proj = vec_mat(&ho, &b.wo);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }

            let xn2 = ln_row(&x, &b.ln2_gain.data, &b.ln2_bias.data);
            let h1 = vec_mat(&xn2, &b.w1);
            let hg: Vec<f64> = h1.iter().map(|&v| gelu(v)).collect();
            let f = vec_mat(&hg, &b.w2);
            for (xv, fv) in x.iter_mut().zip(&f) {
                *xv += fv;
            }
        }
        self.pos += 1;
        x
    }
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows);
    let mut out = vec![0.0; w.cols];
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let wrow = w.row(p);
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
    }
    out
}

fn ln_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv_std * g + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// One sampled continuation with the model's own log-probabilities.
#[derive(Debug, Clone)]
pub struct SampleOut {
    /// Generated tokens (may include the end-of-sequence token last).
    pub tokens: Vec<usize>,
    /// log softmax(logits)[token] at each sampled position, temperature 1.
    pub logprobs: Vec<f64>,
    pub hit_eos: bool,
}

/// Autoregressive sampling until `eos` or `max_new` tokens.
///
/// Temperature 0 takes the argmax with lowest-id tie-break. The returned
/// log-probs are always raw log-softmax values, independent of temperature.
pub fn sample(
    params: &ModelParams,
    prompt: &[usize],
    temperature: f64,
    max_new: usize,
    eos: usize,
    rng: &mut Rng,
) -> Result<SampleOut, NnError> {
    if prompt.is_empty() {
        return Err(NnError::EmptyPrompt);
    }
    params.check_tokens(prompt)?;
    assert!(temperature >= 0.0, "temperature must be non-negative");

    let mut ctx = InferCtx::new(params);
    let mut hidden = Vec::new();
    for &t in prompt {
        hidden = ctx.step(t);
    }

    let vocab = params.cfg.vocab;
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    let mut hit_eos = false;
    let budget = max_new.min(params.cfg.context.saturating_sub(prompt.len()));

    for _ in 0..budget {
        let logits = vec_mat(&hidden, &params.lm_head);
        let mut logp = vec![0.0; vocab];
        log_softmax_row(&logits, &mut logp);

        let next = if temperature == 0.0 {
            argmax_lowest(&logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|&v| v / temperature).collect();
            let mut probs = vec![0.0; vocab];
            softmax_row(&scaled, &mut probs);
            rng.categorical(&probs)
        };
        tokens.push(next);
        logprobs.push(logp[next]);
        if next == eos {
            hit_eos = true;
            break;
        }
        hidden = ctx.step(next);
    }

    Ok(SampleOut {
        tokens,
        logprobs,
        hit_eos,
    })
}

/// Teacher-forced log-probabilities: for each position `t >= from`, the
/// log-probability the model assigns to `tokens[t]` given `tokens[..t]`.
pub fn sequence_logprobs(
    params: &ModelParams,
    tokens: &[usize],
    from: usize,
) -> Result<Vec<f64>, NnError> {
    assert!(from >= 1, "position 0 has no conditioning prefix");
    params.check_tokens(tokens)?;
    let hidden = hidden_states(params, tokens)?;
    let mut out = Vec::with_capacity(tokens.len().saturating_sub(from));
    let mut logp = vec![0.0; params.cfg.vocab];
    for t in from..tokens.len() {
        let logits = vec_mat(hidden.row(t - 1), &params.lm_head);
        log_softmax_row(&logits, &mut logp);
        out.push(logp[tokens[t]]);
    }
    Ok(out)
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

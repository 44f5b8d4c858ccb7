//! Declarative experiment configuration.
//!
//! One TOML document drives the whole pipeline. Every field has a default
//! (the `Default` impls below are the base layer), so a config file only
//! needs to override what it changes. Hyperparameters that the source setup
//! fixes — weight decay 0.1, cosine schedule, KL coefficient 0.2, reward clip
//! 0.7, clip range 0.2, lambda 0.95, gamma 1.0, per-scheme batch sizes and
//! learning rates — ship as those defaults; batch sizes scale down by
//! `batch_divisor` to fit a desk-scale run.

use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::model::ModelConfig;
use crate::ppo::PpoConfig;
use crate::reward::{EmptyStepsFallback, RewardScheme, SchemeKind};
use crate::rm::RmConfig;
use crate::sft::SftConfig;
use crate::task::{CorpusSpec, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMix {
    SimpleOnly,
    ComplexOnly,
    Mixed,
}

impl PromptMix {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMix::SimpleOnly => "simple_only",
            PromptMix::ComplexOnly => "complex_only",
            PromptMix::Mixed => "mixed",
        }
    }

    pub fn all() -> [PromptMix; 3] {
        [PromptMix::SimpleOnly, PromptMix::ComplexOnly, PromptMix::Mixed]
    }

    pub fn parse(s: &str) -> Option<PromptMix> {
        PromptMix::all().into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub context: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            blocks: 2,
            heads: 2,
            context: 160,
        }
    }
}

impl ModelSpec {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: Vocabulary::size(),
            dim: self.dim,
            blocks: self.blocks,
            heads: self.heads,
            context: self.context,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftStage {
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Overrides the scaled batch size when set.
    pub batch_size: Option<usize>,
}

impl Default for SftStage {
    fn default() -> Self {
        Self {
            epochs: 40,
            base_lr: 1e-2,
            weight_decay: 0.1,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmStage {
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: Option<usize>,
}

impl Default for RmStage {
    fn default() -> Self {
        Self {
            epochs: 10,
            base_lr: 1e-2,
            weight_decay: 0.1,
            batch_size: None,
        }
    }
}

/// The ORM fine-tunes from the trained PRM, so it needs only a short, gentle
/// pass on the last-token objective.
fn default_orm_stage() -> RmStage {
    RmStage {
        epochs: 2,
        base_lr: 5e-3,
        weight_decay: 0.1,
        batch_size: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoStage {
    pub gamma: f64,
    pub lambda: f64,
    pub policy_clip: f64,
    pub value_clip: f64,
    pub kl_coef: f64,
    pub reward_clip: f64,
    pub reward_scheme: SchemeKind,
    pub prompt_mix: PromptMix,
    pub empty_steps_fallback: EmptyStepsFallback,
    pub total_steps: usize,
    pub epochs_per_batch: usize,
    pub actor_lr: f64,
    /// Per-scheme default when unset (5e-5 for max/min/orm, 1e-4 for
    /// avg/prod).
    pub critic_lr: Option<f64>,
    /// Per-scheme default divided by `batch_divisor` when unset.
    pub rollout_batch: Option<usize>,
    /// rollout_batch / 4 when unset.
    pub minibatch: Option<usize>,
    pub whiten_advantages: bool,
    pub temperature: f64,
    pub max_new: usize,
    pub eval_every: usize,
}

impl Default for PpoStage {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 0.95,
            policy_clip: 0.2,
            value_clip: 0.2,
            kl_coef: 0.2,
            reward_clip: 0.7,
            reward_scheme: SchemeKind::PrmMax,
            prompt_mix: PromptMix::Mixed,
            empty_steps_fallback: EmptyStepsFallback::Zero,
            total_steps: 30,
            epochs_per_batch: 4,
            actor_lr: 1e-4,
            critic_lr: None,
            rollout_batch: None,
            minibatch: None,
            whiten_advantages: true,
            temperature: 1.0,
            max_new: 112,
            eval_every: 10,
        }
    }
}

/// Rollout batch sizes as published per scheme (144 where unstated).
pub fn paper_ppo_batch(kind: SchemeKind) -> usize {
    match kind {
        SchemeKind::Orm => 144,
        SchemeKind::PrmAvg => 144,
        SchemeKind::PrmProd => 126,
        SchemeKind::PrmMax => 160,
        SchemeKind::PrmMin => 144,
    }
}

/// Published critic learning rates per scheme (actor is always 1e-4).
pub fn paper_critic_lr(kind: SchemeKind) -> f64 {
    match kind {
        SchemeKind::PrmAvg | SchemeKind::PrmProd => 1e-4,
        SchemeKind::PrmMax | SchemeKind::PrmMin | SchemeKind::Orm => 5e-5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    /// Held-out problems per family used for results tables.
    pub table_prompts: usize,
    /// Held-out problems probed periodically during PPO training.
    pub train_probe_prompts: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            table_prompts: 100,
            train_probe_prompts: 16,
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_out_dir() -> String {
    "runs".into()
}

fn default_batch_divisor() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Published batch sizes (152 SFT, 126-160 PPO) divide by this to fit
    /// desk scale.
    pub batch_divisor: usize,
    pub model: ModelSpec,
    pub corpus: CorpusSpec,
    pub sft: SftStage,
    #[serde(default = "default_orm_stage")]
    pub orm: RmStage,
    pub prm: RmStage,
    pub ppo: PpoStage,
    pub eval: EvalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            out_dir: default_out_dir(),
            batch_divisor: default_batch_divisor(),
            model: ModelSpec::default(),
            corpus: CorpusSpec::default(),
            sft: SftStage::default(),
            orm: default_orm_stage(),
            prm: RmStage::default(),
            ppo: PpoStage::default(),
            eval: EvalSpec::default(),
        }
    }
}

const PAPER_SFT_BATCH: usize = 152;
const PAPER_RM_BATCH: usize = 152;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.batch_divisor == 0 {
            return Err(HarnessError::Config("batch_divisor must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.corpus.corruption_fraction) {
            return Err(HarnessError::Config(
                "corruption_fraction must lie in [0, 1]".into(),
            ));
        }
        if !self.model.dim.is_multiple_of(self.model.heads) {
            return Err(HarnessError::Config(
                "model.heads must divide model.dim".into(),
            ));
        }
        if self.corpus.max_tokens > self.model.context {
            return Err(HarnessError::Config(
                "corpus.max_tokens must fit the model context".into(),
            ));
        }
        Ok(())
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            epochs: self.sft.epochs,
            batch_size: self
                .sft
                .batch_size
                .unwrap_or_else(|| (PAPER_SFT_BATCH / self.batch_divisor).max(1)),
            base_lr: self.sft.base_lr,
            weight_decay: self.sft.weight_decay,
            seed: crate::rng::derive_seed(self.seed, 1),
        }
    }

    pub fn rm_config(&self, objective: crate::rm::RmObjective) -> RmConfig {
        let stage = match objective {
            crate::rm::RmObjective::Orm => &self.orm,
            crate::rm::RmObjective::Prm => &self.prm,
        };
        RmConfig {
            epochs: stage.epochs,
            batch_size: stage
                .batch_size
                .unwrap_or_else(|| (PAPER_RM_BATCH / self.batch_divisor).max(1)),
            base_lr: stage.base_lr,
            weight_decay: stage.weight_decay,
            seed: crate::rng::derive_seed(self.seed, 2 + objective as u64),
        }
    }

    /// PPO config resolved for one (scheme, mix) cell.
    pub fn ppo_config(&self, kind: SchemeKind, mix: PromptMix) -> PpoConfig {
        let rollout_batch = self
            .ppo
            .rollout_batch
            .unwrap_or_else(|| (paper_ppo_batch(kind) / self.batch_divisor).max(1));
        PpoConfig {
            gamma: self.ppo.gamma,
            lambda: self.ppo.lambda,
            policy_clip: self.ppo.policy_clip,
            value_clip: self.ppo.value_clip,
            rollout_batch,
            epochs_per_batch: self.ppo.epochs_per_batch,
            minibatch: self.ppo.minibatch.unwrap_or_else(|| (rollout_batch / 4).max(1)),
            actor_lr: self.ppo.actor_lr,
            critic_lr: self.ppo.critic_lr.unwrap_or_else(|| paper_critic_lr(kind)),
            total_steps: self.ppo.total_steps,
            whiten_advantages: self.ppo.whiten_advantages,
            temperature: self.ppo.temperature,
            max_new: self.ppo.max_new,
            eval_every: self.ppo.eval_every,
            seed: crate::rng::derive_seed(self.seed, 0xce11 + kind as u64 * 8 + mix as u64),
        }
    }

    pub fn reward_scheme(&self, kind: SchemeKind) -> RewardScheme {
        RewardScheme {
            kind,
            kl_coefficient: self.ppo.kl_coef,
            reward_clip: self.ppo.reward_clip,
            empty_steps_fallback: self.ppo.empty_steps_fallback,
        }
    }
}

//! Step-level RLHF on a synthetic arithmetic task.
//!
//! The crate implements the full desk-scale pipeline: corpus generation with
//! programmatic step labels, a tiny autoregressive transformer with its own
//! reverse-mode autodiff, supervised fine-tuning, outcome- and process-
//! supervised reward models, PPO with KL-shaped rewards under five reward
//! delivery schemes, and a config-driven experiment harness.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod ppo;
pub mod reward;
pub mod rm;
pub mod rng;
pub mod sft;
pub mod task;
pub mod tensor;

pub use config::{ExperimentConfig, PromptMix};
pub use error::{HarnessError, NnError, TaskError, TrainError};
pub use graph::{Graph, NodeId};
pub use harness::{Harness, ResultRow, ResultsTable};
pub use model::{forward, sample, Head, ModelConfig, ModelParams};
pub use reward::{RewardScheme, SchemeKind};
pub use rng::Rng;
pub use tensor::Tensor;

//! Error types shared across the crate.

use thiserror::Error;

/// Engine-level errors: graph, model, optimizer, checkpoints.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("loss must be scalar, got [{rows} x {cols}]")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("sequence length {len} exceeds model context {context}")]
    OverlongSequence { len: usize, context: usize },
    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("checkpoint objective mismatch: expected {expected}, found {found}")]
    ObjectiveMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Synthetic-task errors: generation, labeling, encoding, corpus IO.
#[derive(Debug, Error)]
pub enum TaskError {
    #[error("step index {index} out of range for {steps} steps")]
    StepIndexOutOfRange { index: usize, steps: usize },
    #[error("solution has {solution_steps} steps but problem has {problem_ops} operations")]
    StepCountMismatch {
        solution_steps: usize,
        problem_ops: usize,
    },
    #[error("symbol {0:?} not in vocabulary")]
    UnknownSymbol(char),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Training-stage errors (SFT, reward models, PPO).
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus contains a single class; both labels are required")]
    SingleClassCorpus,
    #[error("batch mask selects no positions")]
    EmptyMask,
    #[error("step scores are empty")]
    EmptyStepScores,
    #[error("per-token vectors disagree in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Harness/orchestration errors.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing dependency artifact: {0}")]
    MissingArtifact(String),
    #[error("empty results table")]
    EmptyResults,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

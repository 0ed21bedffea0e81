use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layout error: {0}")]
    Layout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("matching error: {0}")]
    Matching(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("generation config error: {0}")]
    GenConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite loss at step {step} (batch {batch_id})")]
    NonFiniteLoss { step: usize, batch_id: usize },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

//! Causal language model over the 260-token vocabulary: configuration,
//! parameters, forward/backward passes, incremental decoding, training and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod model;
pub mod params;
pub mod session;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Mechanism, ModelConfig, TrainConfig};
pub use layers::nll_loss;
pub use model::{argmax, BackpropMode, Model, TrainExample};
pub use params::ModelParams;
pub use session::DecodeSession;
pub use train::{make_windows, train, TrainReport};

use crate::attention::AttentionError;
use crate::codec::TokenId;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    WindowOverflow { len: usize, max_len: usize },
    #[error("token id {0} outside the vocabulary")]
    InvalidToken(TokenId),
    #[error("every target position is masked")]
    EmptyBatch,
    #[error("no training windows")]
    NoWindows,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("loss diverged at step {step}; parameters restored to step {last_good_step}")]
    DivergenceDetected { step: usize, last_good_step: usize, checkpoint: Option<std::path::PathBuf> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LmError {
    /// True for failures caused by non-finite or degenerate numbers rather
    /// than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            LmError::NonFinite(_)
                | LmError::Attention(AttentionError::NumericDomain(_))
                | LmError::Attention(AttentionError::DegenerateNormalizer { .. })
        )
    }
}

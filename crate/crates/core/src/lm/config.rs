//! Model and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::codec::VOCAB_SIZE;

use super::LmError;

/// Sequence mixer used by every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    /// Local softmax heads plus kernelized linear heads.
    #[default]
    Linear,
    Rwkv,
    Retnet,
    /// Full causal softmax attention; only practical for short windows.
    VaswaniSmall,
}

impl std::str::FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Mechanism::Linear),
            "rwkv" => Ok(Mechanism::Rwkv),
            "retnet" => Ok(Mechanism::Retnet),
            "vaswani-small" => Ok(Mechanism::VaswaniSmall),
            other => Err(format!("unknown mechanism {other:?}")),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::Linear => "linear",
            Mechanism::Rwkv => "rwkv",
            Mechanism::Retnet => "retnet",
            Mechanism::VaswaniSmall => "vaswani-small",
        })
    }
}

pub const MAX_LEN_3K: usize = 3072;
pub const MAX_LEN_12K: usize = 12032;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Width of the residual stream.
    pub model_dim: usize,
    /// Width of the token/position embeddings; projected to `model_dim` when different.
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Heads (counted from the first) that use windowed softmax attention.
    pub local_heads: usize,
    pub local_window: usize,
    pub depth: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub mechanism: Mechanism,
    /// Recompute layer inputs from outputs during backprop instead of storing them.
    pub reversible: bool,
    /// Set on presets that copy published values verbatim, even where they do
    /// not fit together (12 heads x 256 is not 512).
    pub as_printed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Published hyperparameters with the 3k window.
    pub fn as_printed_3k() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            model_dim: 512,
            embed_dim: 256,
            num_heads: 12,
            head_dim: 256,
            local_heads: 8,
            local_window: 256,
            depth: 24,
            ffn_dim: 512,
            dropout: 0.1,
            max_len: MAX_LEN_3K,
            mechanism: Mechanism::Linear,
            reversible: true,
            as_printed: true,
        }
    }

    pub fn as_printed_12k() -> Self {
        Self { max_len: MAX_LEN_12K, ..Self::as_printed_3k() }
    }

    /// Small configuration that trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            model_dim: 64,
            embed_dim: 64,
            num_heads: 4,
            head_dim: 16,
            local_heads: 2,
            local_window: 32,
            depth: 2,
            ffn_dim: 128,
            dropout: 0.0,
            max_len: 512,
            mechanism: Mechanism::Linear,
            reversible: true,
            as_printed: false,
        }
    }

    /// Minimal configuration for gradient checks.
    pub fn tiny(dim: usize, depth: usize, max_len: usize) -> Self {
        Self {
            model_dim: dim,
            embed_dim: dim,
            num_heads: 2,
            head_dim: (dim / 2).max(2),
            local_heads: 1,
            local_window: 4,
            depth,
            ffn_dim: 2 * dim,
            max_len,
            ..Self::desk()
        }
    }

    pub fn with_mechanism(mut self, mechanism: Mechanism) -> Self {
        self.mechanism = mechanism;
        self
    }

    /// Concatenated width of all heads.
    pub fn inner_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::InvalidConfig(m));
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size));
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(2) {
            return bad(format!("model_dim must be positive and even, got {}", self.model_dim));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.depth == 0 || self.max_len < 2 {
            return bad("depth must be >= 1 and max_len >= 2".into());
        }
        if self.local_heads > self.num_heads {
            return bad(format!("local_heads {} exceeds num_heads {}", self.local_heads, self.num_heads));
        }
        if self.local_heads > 0 && self.local_window == 0 {
            return bad("local_window must be >= 1".into());
        }
        if self.mechanism == Mechanism::Retnet && !self.head_dim.is_multiple_of(2) {
            return bad("retention needs an even head_dim".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Window stride; `None` means `max_len` (disjoint windows).
    pub stride: Option<usize>,
    /// Let windows run across flow boundaries.
    pub pack_flows: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop early once training next-token accuracy reaches this value
    /// (checked every `eval_interval` steps).
    pub target_accuracy: Option<f64>,
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            checkpoint_interval: 0,
            stride: None,
            pack_flows: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            target_accuracy: None,
            eval_interval: 50,
        }
    }
}

impl TrainConfig {
    /// Published optimizer settings.
    pub fn as_printed() -> Self {
        Self { learning_rate: 1e-4, batch_size: 4, steps: 750_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(LmError::InvalidConfig(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(LmError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.stride == Some(0) {
            return Err(LmError::InvalidConfig("stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::as_printed_3k().validate().unwrap();
        assert_eq!(ModelConfig::as_printed_12k().max_len, 12032);
        assert!(ModelConfig::as_printed_3k().as_printed);
        ModelConfig::tiny(8, 1, 16).validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let c = ModelConfig { local_heads: 5, ..ModelConfig::desk() };
        assert!(c.validate().is_err());
        let c = ModelConfig { vocab_size: 256, ..ModelConfig::desk() };
        assert!(c.validate().is_err());
        let c = ModelConfig { model_dim: 63, ..ModelConfig::desk() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn mechanism_names_round_trip() {
        for m in [Mechanism::Linear, Mechanism::Rwkv, Mechanism::Retnet, Mechanism::VaswaniSmall] {
            assert_eq!(m.to_string().parse::<Mechanism>().unwrap(), m);
            let js = serde_json::to_string(&m).unwrap();
            assert_eq!(js, format!("\"{m}\""));
        }
    }
}

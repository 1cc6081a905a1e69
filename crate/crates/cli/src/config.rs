//! The JSON run configuration and its flag overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use traffic_lm::classify::DiscriminateConfig;
use traffic_lm::codec::TokenId;
use traffic_lm::flow::AnonymizePolicy;
use traffic_lm::generate::GenerationConfig;
use traffic_lm::lm::{Mechanism, ModelConfig, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Worker cap; `TRAFFIC_LM_THREADS` lowers it further.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Group each capture into 5-tuple flows before tokenizing.
    pub split: bool,
    pub anonymize: AnonymizePolicy,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { split: true, anonymize: AnonymizePolicy::NONE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub count: usize,
    /// Absolute time of every generated flow's first packet.
    pub base_time_us: u64,
    pub prompt: Vec<TokenId>,
    pub sampling: GenerationConfig,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { count: 100, base_time_us: 1_600_000_000_000_000, prompt: Vec::new(), sampling: GenerationConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySection {
    pub width: usize,
    pub max_len: usize,
    pub train: TrainConfig,
    /// Repetitions of the real-versus-generated test.
    pub seeds: usize,
    pub test_fraction: f64,
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self { width: 1, max_len: 256, train: TrainConfig { steps: 300, ..TrainConfig::default() }, seeds: 10, test_fraction: 0.2 }
    }
}

impl ClassifySection {
    pub fn discriminate(&self) -> DiscriminateConfig {
        DiscriminateConfig { train: self.train.clone(), max_len: self.max_len, seeds: self.seeds, test_fraction: self.test_fraction }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Fields exported by `eval-cdf`; empty means all.
    pub cdf_fields: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Source of every random choice; copied into each section's seed.
    pub seed: u64,
    pub io: IoConfig,
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateSection,
    pub classify: ClassifySection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_len: Option<usize>,
    pub mechanism: Option<Mechanism>,
    pub top_k: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::config("load_config", format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::config("load_config", format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(l) = o.max_len {
            cfg.model.max_len = l;
        }
        if let Some(m) = o.mechanism {
            cfg.model = cfg.model.with_mechanism(m);
        }
        if let Some(k) = o.top_k {
            cfg.generate.sampling.k = k;
        }
        cfg.train.seed = cfg.seed;
        cfg.classify.train.seed = cfg.seed;
        cfg.generate.sampling.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |op: &'static str, e: String| CliError::config(op, e);
        self.model.validate().map_err(|e| bad("validate_model_config", e.to_string()))?;
        self.train.validate().map_err(|e| bad("validate_train_config", e.to_string()))?;
        self.classify.train.validate().map_err(|e| bad("validate_classify_config", e.to_string()))?;
        self.generate.sampling.validate().map_err(|e| bad("validate_generate_config", e.to_string()))?;
        if self.classify.width == 0 || self.classify.width > 2 {
            return Err(bad("validate_classify_config", "width must be 1 or 2".into()));
        }
        if !(0.0 < self.classify.test_fraction && self.classify.test_fraction < 1.0) {
            return Err(bad("validate_classify_config", "test_fraction must lie in (0, 1)".into()));
        }
        if self.io.threads == Some(0) {
            return Err(bad("validate_io_config", "threads must be >= 1".into()));
        }
        Ok(())
    }
}

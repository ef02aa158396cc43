//! Layered settings: built-in defaults, then a TOML file, then flag overrides.

pub use crate::model::OptimizerConfig;

use crate::eval::{Aggregate, TiePolicy};
use crate::exec::Execution;
use crate::grpo::{KlEstimator, StdMode};
use crate::model::ModelError;
use crate::pipeline::SamplingParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: u64,
    /// Pairs (GCPO) or contexts (GRPO) per step.
    pub batch_size: usize,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: u64,
    pub inner_epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 32,
            eval_every: 20,
            inner_epochs: 1,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GcpoSettings {
    pub tie_tolerance: f64,
    pub floor_score: f64,
    /// Sampling temperature of the toy reward model.
    pub temperature: f64,
    /// Standard deviation of the initial parameters.
    pub init_scale: f64,
    pub sft_epochs: usize,
    pub sft_learning_rate: f64,
}

impl Default for GcpoSettings {
    fn default() -> Self {
        Self {
            tie_tolerance: 0.0,
            floor_score: 0.0,
            temperature: 1.0,
            init_scale: 0.01,
            sft_epochs: 50,
            sft_learning_rate: 0.5,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoSettings {
    pub kl_estimator: KlEstimator,
    pub std_mode: StdMode,
    pub floor_score: f64,
    pub vocab: usize,
    /// Tokens per generated sample.
    pub sample_length: usize,
    pub temperature: f64,
    pub target_token: u32,
    pub reward_scale: f64,
    /// Slope of the frozen stub reward model's score logits.
    pub judge_sharpness: f64,
    pub eval_samples: usize,
    pub reward_timeout_secs: u64,
}

impl Default for GrpoSettings {
    fn default() -> Self {
        Self {
            kl_estimator: KlEstimator::K1,
            std_mode: StdMode::Population,
            floor_score: 0.0,
            vocab: 6,
            sample_length: 4,
            temperature: 1.0,
            target_token: 0,
            reward_scale: 10.0,
            judge_sharpness: 4.0,
            eval_samples: 16,
            reward_timeout_secs: 60,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub variants: Vec<SamplingParams>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            variants: SamplingParams::defaults(),
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ties: TiePolicy,
    pub best_of: usize,
    pub aggregate: Aggregate,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ties: TiePolicy::Strict,
            best_of: 1,
            aggregate: Aggregate::Mean,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub execution: Execution,
    /// Worker threads; 0 lets the runtime decide, 1 runs sequentially.
    pub parallelism: usize,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub optimizer: OptimizerConfig,
    pub train: TrainSettings,
    pub gcpo: GcpoSettings,
    pub grpo: GrpoSettings,
    pub pipeline: PipelineSettings,
    pub eval: EvalSettings,
    pub run: RunSettings,
}

/// Command-line overrides; `None` leaves the loaded value alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub clip_epsilon: Option<f64>,
    pub group_size: Option<usize>,
    pub kl_beta: Option<f64>,
    pub std_epsilon: Option<f64>,
    pub parallelism: Option<usize>,
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

fn find_unknown(given: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (key, value) in given {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (value, known.get(key)) {
            (_, None) => return Some(path),
            (toml::Value::Table(g), Some(toml::Value::Table(k))) => {
                if let Some(p) = find_unknown(g, k, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

impl Settings {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::ConfigParse(e.to_string()))?;
        let known = toml::Table::try_from(Settings::default()).map_err(|e| ConfigError::ConfigParse(e.to_string()))?;
        if let Some(path) = find_unknown(&table, &known, "") {
            return Err(ConfigError::UnknownKey(path));
        }
        let settings: Settings = toml::from_str(text).map_err(|e| ConfigError::ConfigParse(e.to_string()))?;
        settings.validate()?;
        Ok(settings)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Defaults, then `path` if given, then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut settings = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        settings.apply(overrides);
        settings.validate()?;
        Ok(settings)
    }

    pub fn apply(&mut self, o: &Overrides) {
        let opt = &mut self.optimizer;
        if let Some(v) = o.seed {
            opt.seed = v;
        }
        if let Some(v) = o.clip_epsilon {
            opt.clip_epsilon = v;
        }
        if let Some(v) = o.group_size {
            opt.group_size = v;
        }
        if let Some(v) = o.kl_beta {
            opt.kl_beta = v;
        }
        if let Some(v) = o.std_epsilon {
            opt.std_epsilon = v;
        }
        if let Some(v) = o.parallelism {
            self.run.parallelism = v;
            if v == 1 {
                self.run.execution = Execution::Sequential;
            }
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(ModelError::violation("train.batch_size", "must be positive"));
        }
        if self.eval.best_of == 0 {
            return Err(ModelError::violation("eval.best_of", "must be at least 1"));
        }
        let (tg, tr) = (self.gcpo.temperature, self.grpo.temperature);
        if tg.is_nan() || tg < 0.0 || tr.is_nan() || tr <= 0.0 {
            return Err(ModelError::violation("temperature", "must be nonnegative (gcpo) or positive (grpo)"));
        }
        if self.grpo.vocab == 0 || self.grpo.target_token as usize >= self.grpo.vocab {
            return Err(ModelError::violation("grpo.target_token", "must be a token of the vocabulary"));
        }
        if self.grpo.sample_length == 0 {
            return Err(ModelError::violation("grpo.sample_length", "must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize to TOML")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn execution(&self) -> Execution {
        if self.run.parallelism == 1 {
            Execution::Sequential
        } else {
            self.run.execution
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let s = Settings::from_toml_str("").unwrap();
        assert_eq!(s, Settings::default());
        assert_eq!(s.optimizer.clip_epsilon, 0.2);
        assert_eq!(s.optimizer.group_size, 24);
        assert_eq!(s.optimizer.kl_beta, 0.04);
        assert_eq!(s.optimizer.std_epsilon, 1e-8);
    }

    #[test]
    fn flags_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[optimizer]\nclip_epsilon = 0.3\ngroup_size = 8\n").unwrap();
        let o = Overrides {
            clip_epsilon: Some(0.1),
            ..Overrides::default()
        };
        let s = Settings::resolve(Some(&path), &o).unwrap();
        assert_eq!(s.optimizer.clip_epsilon, 0.1);
        assert_eq!(s.optimizer.group_size, 8);
    }

    #[test]
    fn typos_are_rejected() {
        let err = Settings::from_toml_str("[optimizer]\nclip_epsilonn = 0.3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "optimizer.clip_epsilonn"));
        assert!(matches!(Settings::from_toml_str("[optimiser]\n"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(Settings::from_toml_str("[optimizer\n"), Err(ConfigError::ConfigParse(_))));
    }

    #[test]
    fn toml_round_trip_and_stable_hash() {
        let mut s = Settings::default();
        s.optimizer.seed = 9;
        let back = Settings::from_toml_str(&s.to_toml()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
        assert_ne!(Settings::default().hash(), s.hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(
            Settings::from_toml_str("[optimizer]\nclip_epsilon = 1.5\n"),
            Err(ConfigError::Invalid(_))
        ));
    }
}

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BenchmarkConfig;
use crate::model::{ModelSpec, SgdHyper};
use crate::strategies::StrategyConfig;

/// Settings for the networked deployment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Clients the server waits for before the first round.
    pub clients: usize,
    /// How long the server waits for all JOINs.
    pub join_timeout_secs: u64,
    /// Per-read timeout once the experiment runs; 0 disables it.
    pub io_timeout_secs: u64,
    pub connect_retries: u32,
    pub retry_delay_ms: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            clients: 3,
            join_timeout_secs: 60,
            io_timeout_secs: 600,
            connect_retries: 10,
            retry_delay_ms: 500,
        }
    }
}

/// Everything that determines a run. Two runs with equal configs produce
/// identical metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Rounds of linear learning-rate ramp from `lr / 10`.
    pub warmup_rounds: usize,
    /// Rounds before personalization mechanics (APFL alpha updates) engage.
    pub personalization_delay: usize,
    pub strategy: StrategyConfig,
    pub model: ModelSpec,
    pub data: BenchmarkConfig,
    pub network: NetworkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            rounds: 30,
            local_epochs: 1,
            batch_size: 32,
            lr: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            warmup_rounds: 5,
            personalization_delay: 5,
            strategy: StrategyConfig::default(),
            model: ModelSpec::default(),
            data: BenchmarkConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

/// One invalid field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ExperimentConfig {
    /// Strict TOML parse: unknown keys are errors, omitted keys take defaults.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// The fully-defaulted config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn sgd(&self, lr: f64) -> SgdHyper {
        SgdHyper {
            lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
        }
    }

    /// Every problem with the config, not just the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut bad = |path: &str, message: &str| {
            errs.push(FieldError {
                path: path.to_string(),
                message: message.to_string(),
            })
        };
        if self.rounds == 0 {
            bad("rounds", "must be >= 1");
        }
        if self.warmup_rounds > self.rounds {
            bad("warmup_rounds", "must be <= rounds");
        }
        if self.local_epochs == 0 {
            bad("local_epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be >= 1");
        }
        if !(self.lr >= 0.0) {
            bad("lr", "must be >= 0");
        }
        if !(self.weight_decay >= 0.0) {
            bad("weight_decay", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad("momentum", "must be in [0, 1)");
        }
        for (field, msg) in self.strategy.problems() {
            bad(&format!("strategy.{field}"), &msg);
        }
        for (field, msg) in self.model.problems() {
            bad(&format!("model.{field}"), &msg);
        }
        for (field, msg) in self.data.problems() {
            bad(&format!("data.{field}"), &msg);
        }
        if self.model.joints != self.data.joints {
            bad("model.joints", "must equal data.joints");
        }
        if self.model.classes != self.data.num_classes() {
            bad(
                "model.classes",
                &format!("benchmark has {} classes", self.data.num_classes()),
            );
        }
        if self.network.clients != self.data.num_sites() {
            bad("network.clients", "must equal the number of data sites");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

//! The run configuration document (TOML). Every section has defaults, so an
//! empty file is a valid config; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{EnvConfig, StageConfig};
use crate::eval::{EvalError, TurnExperimentSpec};
use crate::ppo::{NetworkConfig, PpoError, PpoHyperparams, Schedule, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialization error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Training(#[from] PpoError),
    #[error("invalid config: {0}")]
    Eval(#[from] EvalError),
    #[error("invalid config: {0}")]
    Other(String),
}

/// Evaluation settings used by `eval-turn` and `eval-task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub turn: TurnExperimentSpec,
    pub task_trials: usize,
    /// Speed of the scripted straight-to-target command, m/s.
    pub task_command_speed: f64,
    /// Sample episode physics from the training ranges during task trials.
    pub task_randomize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { turn: TurnExperimentSpec::default(), task_trials: 15, task_command_speed: 1.0, task_randomize: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    /// State messages per second.
    pub rate_hz: f64,
    /// Seconds without a controlling client before the simulation pauses.
    pub disconnect_grace: f64,
    pub port: u16,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { rate_hz: 25.0, disconnect_grace: 2.0, port: 8765 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub ppo: PpoHyperparams,
    pub network: NetworkConfig,
    pub schedule: Schedule,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            env: t.env,
            stage1: t.stage1,
            stage2: t.stage2,
            ppo: t.ppo,
            network: t.network,
            schedule: t.schedule,
            eval: EvalConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            env: self.env,
            stage1: self.stage1,
            stage2: self.stage2,
            ppo: self.ppo,
            network: self.network.clone(),
            schedule: self.schedule,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train_config().validate()?;
        self.eval.turn.validate()?;
        if self.eval.task_trials == 0 || !(self.eval.task_command_speed > 0.0) {
            return Err(ConfigError::Other("eval.task_trials and eval.task_command_speed must be positive".into()));
        }
        if !(self.serve.rate_hz > 0.0 && self.serve.rate_hz.is_finite() && self.serve.disconnect_grace >= 0.0) {
            return Err(ConfigError::Other("serve.rate_hz must be positive and disconnect_grace non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// The effective config with every default filled in.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the effective TOML text.
    pub fn digest(&self) -> Result<[u8; 32], ConfigError> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).into())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.ppo.num_lanes = 8;
        c.eval.turn.rollouts_per_cell = 3;
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(c.digest().unwrap(), RunConfig::from_toml_str(&text).unwrap().digest().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml_str("[ppo]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("learning_rat"), "{e}");
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[env.camera]\nhfov = 1.0\nzoom = 2\n").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_toml_str("seed = 3\n[schedule]\ntotal_updates = 10\nstage1_updates = 4\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.schedule.total_updates, 10);
        assert_eq!(c.schedule.checkpoint_every, Schedule::default().checkpoint_every);
        assert_eq!(c.env, EnvConfig::default());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[env]\ndt = -0.02\n").is_err());
        assert!(RunConfig::from_toml_str("[serve]\nrate_hz = 0.0\n").is_err());
        assert!(RunConfig::from_toml_str("[eval.turn]\ntrigger_radius = 0.0\n").is_err());
    }
}

//! Pipeline configuration: one TOML file covering search budgets, reward
//! knobs, backend endpoints, and the mock-world parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendConfig, MockWorldSpec, Role};
use crate::reward::{ADVANTAGE_EPSILON, DEFAULT_PRM_FLOOR};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {cause}")]
    Read { path: String, cause: String },
    #[error("cannot parse {path}: {cause}")]
    Parse { path: String, cause: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// The four backend slots; unlisted slots default to the mock world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Backends {
    pub policy: BackendConfig,
    pub small_policy: BackendConfig,
    pub prm: BackendConfig,
    pub orm: BackendConfig,
}

impl Default for Backends {
    fn default() -> Self {
        Backends {
            policy: BackendConfig::mock(Role::Policy),
            small_policy: BackendConfig::mock(Role::SmallPolicy),
            prm: BackendConfig::mock(Role::Prm),
            orm: BackendConfig::mock(Role::Orm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Exploration budget: candidate next-steps per expansion.
    pub e: usize,
    /// The smaller diversity policy explores `small_budget_multiplier * e`.
    pub small_budget_multiplier: usize,
    pub max_depth: usize,
    /// Sampling temperature applied to both generation policies.
    pub temperature_policy: f64,
    /// Plausibility floor for min-side selection; 0 disables.
    pub prm_floor: f64,
    /// Advantage-denominator clamp.
    pub epsilon: f64,
    /// DPO beta carried through to the toy trainer and dataset consumers.
    pub beta: f64,
    pub concurrency: usize,
    pub seed: u64,
    /// Opt-in emission of one extra pair per divergence level.
    pub step_level_pairs: bool,
    pub backends: Backends,
    /// Parameters of the deterministic mock world (used when the backend
    /// endpoints are "mock" or the run forces mock mode).
    pub mock: MockWorldSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            e: 5,
            small_budget_multiplier: 2,
            max_depth: 10,
            temperature_policy: 0.8,
            prm_floor: DEFAULT_PRM_FLOOR,
            epsilon: ADVANTAGE_EPSILON,
            beta: 0.8,
            concurrency: 4,
            seed: 0,
            step_level_pairs: false,
            backends: Backends::default(),
            mock: MockWorldSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            cause: e.to_string(),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse { cause, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                cause,
            },
            other => other,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<inline>".to_string(),
            cause: e.to_string(),
        })?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Assign role slots and propagate the policy temperature to the two
    /// generation backends.
    pub fn normalize(&mut self) {
        self.backends.policy.role = Role::Policy;
        self.backends.small_policy.role = Role::SmallPolicy;
        self.backends.prm.role = Role::Prm;
        self.backends.orm.role = Role::Orm;
        self.backends.policy.temperature = self.temperature_policy;
        self.backends.small_policy.temperature = self.temperature_policy;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.e < 2 {
            return Err(ConfigError::Invalid(format!(
                "e must be >= 2, got {}",
                self.e
            )));
        }
        if self.small_budget_multiplier < 1 {
            return Err(ConfigError::Invalid(
                "small_budget_multiplier must be >= 1".into(),
            ));
        }
        if self.max_depth < 1 {
            return Err(ConfigError::Invalid("max_depth must be >= 1".into()));
        }
        if self.concurrency < 1 {
            return Err(ConfigError::Invalid("concurrency must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.prm_floor) {
            return Err(ConfigError::Invalid(format!(
                "prm_floor must lie in [0,1], got {}",
                self.prm_floor
            )));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(ConfigError::Invalid("epsilon must be positive".into()));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(ConfigError::Invalid(
                "beta must be positive and finite".into(),
            ));
        }
        if !self.temperature_policy.is_finite() || self.temperature_policy < 0.0 {
            return Err(ConfigError::Invalid(
                "temperature_policy must be >= 0".into(),
            ));
        }
        self.mock.validate().map_err(ConfigError::Invalid)?;
        let mocks = [
            self.backends.policy.is_mock(),
            self.backends.small_policy.is_mock(),
            self.backends.prm.is_mock(),
            self.backends.orm.is_mock(),
        ];
        if mocks.iter().any(|&m| m) && !mocks.iter().all(|&m| m) {
            return Err(ConfigError::Invalid(
                "backends must be all mock or all HTTP; mixing is not supported".into(),
            ));
        }
        Ok(())
    }

    pub fn all_mock(&self) -> bool {
        self.backends.policy.is_mock()
            && self.backends.small_policy.is_mock()
            && self.backends.prm.is_mock()
            && self.backends.orm.is_mock()
    }

    /// Small-policy exploration budget (`2E` by default).
    pub fn small_budget(&self) -> usize {
        self.small_budget_multiplier * self.e
    }

    /// Force every backend to the mock world (the `--mock` flag).
    pub fn force_mock(&mut self) {
        self.backends = Backends::default();
        self.normalize();
    }
}

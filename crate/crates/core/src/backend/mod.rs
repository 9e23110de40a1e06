//! Uniform access to the four model roles: the generation policy, the
//! smaller diversity policy, the step scorer (PRM), and the trajectory
//! scorer (ORM).
//!
//! Real runs go over HTTP (OpenAI-compatible chat completions for
//! generation, a one-route `POST /score` protocol for scoring); tests and
//! offline runs use a deterministic mock world. All scores are clamped to
//! their declared intervals at this boundary regardless of backend
//! behavior.

mod http;
mod mock;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpGateway;
pub use mock::{MockGateway, MockWorldSpec};

/// Environment variable consulted for the API key on HTTP backends.
pub const API_KEY_ENV: &str = "PREFGEN_API_KEY";

/// The four backend roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Policy,
    SmallPolicy,
    Prm,
    Orm,
}

/// The two roles that generate candidate steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenRole {
    Policy,
    SmallPolicy,
}

/// One problem: a question, its ground-truth final answer, an identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub answer: String,
}

/// Connection settings for one backend role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Role this entry serves; filled from its slot in the pipeline config.
    #[serde(skip)]
    pub role: Role,
    /// Base URL, or the literal `"mock"` for the deterministic test world.
    pub endpoint: String,
    pub model_name: String,
    /// Sampling temperature; scoring roles ignore it.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_step_tokens")]
    pub max_step_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_temperature() -> f64 {
    0.8
}
fn default_max_step_tokens() -> u32 {
    512
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_retries() -> u32 {
    3
}

impl BackendConfig {
    pub fn mock(role: Role) -> Self {
        BackendConfig {
            role,
            endpoint: "mock".to_string(),
            model_name: format!("mock-{role:?}").to_lowercase(),
            temperature: default_temperature(),
            max_step_tokens: default_max_step_tokens(),
            request_timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            seed: 0,
        }
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock"
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}

/// A step's two gateway-produced scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    /// PRM score, clamped into [0, 1] at the gateway boundary.
    pub prm: f64,
    /// exp(mean per-token log-probability) of the step, in (0, 1].
    pub policy_likelihood: f64,
}

/// One generated candidate next-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedStep {
    pub text: String,
    /// exp(mean per-token log-probability) under the generating policy.
    pub policy_likelihood: f64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{role:?} transport failure after {attempts} attempts: {cause}")]
    Transport {
        role: Role,
        attempts: u32,
        cause: String,
    },
    #[error("{role:?} returned {got} candidates, wanted {want}")]
    BudgetShortfall { role: Role, want: usize, got: usize },
    #[error("{role:?} response missing field {field:?}")]
    MalformedResponse { role: Role, field: String },
}

/// Clamp a reward-model score into [0, 1], mapping non-finite values to 0.
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Clamp a likelihood into (0, 1].
pub(crate) fn clamp_likelihood(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(f64::MIN_POSITIVE, 1.0)
    } else {
        f64::MIN_POSITIVE
    }
}

/// Uniform surface over the model roles. Implementations must be pure
/// functions of their inputs in mock mode so pipeline replays are
/// byte-identical; they are shared across worker threads.
pub trait InferenceGateway: Send + Sync {
    /// Sample exactly `n` candidate next-steps for `prefix`. Never silently
    /// truncates: a backend that cannot fill the budget after retries is a
    /// `BudgetShortfall`. `request_seed` keys per-problem determinism.
    fn generate_steps(
        &self,
        role: GenRole,
        prefix: &str,
        n: usize,
        request_seed: u64,
    ) -> Result<Vec<GeneratedStep>, GatewayError>;

    /// PRM score of `step` conditioned on the full `prefix`, in [0, 1].
    fn score_step_prm(&self, prefix: &str, step: &str) -> Result<f64, GatewayError>;

    /// ORM score of a complete trajectory rendering, in [0, 1]. The default
    /// contract (mock and offline runs) is the answer-match indicator.
    fn score_trajectory_orm(
        &self,
        problem: &Problem,
        solution_text: &str,
    ) -> Result<f64, GatewayError>;

    /// Bundle a generated candidate's two scores, re-clamped into their
    /// declared ranges at this boundary.
    fn score_step(
        &self,
        prefix: &str,
        candidate: &GeneratedStep,
    ) -> Result<StepScore, GatewayError> {
        Ok(StepScore {
            prm: clamp_unit(self.score_step_prm(prefix, &candidate.text)?),
            policy_likelihood: clamp_likelihood(candidate.policy_likelihood),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_hold_under_misbehavior() {
        assert_eq!(clamp_unit(1.7), 1.0);
        assert_eq!(clamp_unit(-0.2), 0.0);
        assert_eq!(clamp_unit(f64::NAN), 0.0);
        assert_eq!(clamp_likelihood(0.0), f64::MIN_POSITIVE);
        assert_eq!(clamp_likelihood(3.0), 1.0);
        assert!(clamp_likelihood(0.4) == 0.4);
    }

    #[test]
    fn config_defaults() {
        let cfg = BackendConfig::mock(Role::Policy);
        assert_eq!(cfg.temperature, 0.8);
        assert!(cfg.is_mock());
        assert_eq!(cfg.max_retries, 3);
    }
}

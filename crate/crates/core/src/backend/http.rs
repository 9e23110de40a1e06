//! HTTP gateway: OpenAI-compatible chat completions for generation and a
//! one-route scoring protocol for the reward models.
//!
//! Generation: `POST {endpoint}/v1/chat/completions` with `n` choices,
//! `logprobs` requested, and the step delimiter (`"\n"`) as the stop
//! sequence. The step likelihood is `exp(mean token log-probability)`; a
//! backend that omits logprobs degrades to a neutral likelihood of 1.0.
//!
//! Scoring: `POST {endpoint}/score` with body `{"prefix": str, "step": str}`
//! returning `{"score": float}`. The PRM is called with the chain prefix and
//! the candidate step; the ORM with the problem question as prefix and the
//! full solution rendering as step.
//!
//! Transient failures (transport errors, HTTP 429/5xx, short candidate
//! lists) are retried with exponential backoff and full jitter; a problem
//! whose call budget is exhausted aborts that rollout only.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    clamp_likelihood, clamp_unit, BackendConfig, GatewayError, GenRole, GeneratedStep,
    InferenceGateway, Problem, Role, API_KEY_ENV,
};
use crate::hashing::stable_hash64;

const BACKOFF_BASE: Duration = Duration::from_millis(250);
const BACKOFF_CAP: Duration = Duration::from_secs(5);

/// Gateway over four HTTP backend configs (one per role).
pub struct HttpGateway {
    policy: BackendConfig,
    small_policy: BackendConfig,
    prm: BackendConfig,
    orm: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpGateway {
    pub fn new(
        policy: BackendConfig,
        small_policy: BackendConfig,
        prm: BackendConfig,
        orm: BackendConfig,
    ) -> Result<Self, GatewayError> {
        let timeout = policy.request_timeout();
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                role: Role::Policy,
                attempts: 0,
                cause: e.to_string(),
            })?;
        Ok(HttpGateway {
            policy,
            small_policy,
            prm,
            orm,
            client,
            api_key: std::env::var(API_KEY_ENV).ok(),
        })
    }

    fn config(&self, role: Role) -> &BackendConfig {
        match role {
            Role::Policy => &self.policy,
            Role::SmallPolicy => &self.small_policy,
            Role::Prm => &self.prm,
            Role::Orm => &self.orm,
        }
    }

    /// Check every distinct endpoint answers TCP/HTTP at all; a 4xx body is
    /// fine, a connection failure is a startup error.
    pub fn preflight(&self) -> Result<(), GatewayError> {
        let mut seen = std::collections::HashSet::new();
        for role in [Role::Policy, Role::SmallPolicy, Role::Prm, Role::Orm] {
            let cfg = self.config(role);
            if !seen.insert(cfg.endpoint.clone()) {
                continue;
            }
            self.client
                .get(&cfg.endpoint)
                .timeout(Duration::from_secs(5))
                .send()
                .map_err(|e| GatewayError::Transport {
                    role,
                    attempts: 1,
                    cause: format!("preflight to {} failed: {e}", cfg.endpoint),
                })?;
        }
        Ok(())
    }

    fn with_retries<T>(
        &self,
        role: Role,
        mut call: impl FnMut() -> Result<T, RetryableError>,
    ) -> Result<T, GatewayError> {
        let max_retries = self.config(role).max_retries;
        let mut attempt = 0u32;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(RetryableError::Fatal(e)) => {
                    return Err(GatewayError::Transport {
                        role,
                        attempts: attempt + 1,
                        cause: e,
                    })
                }
                Err(RetryableError::Retry(cause)) => {
                    if attempt >= max_retries {
                        return Err(GatewayError::Transport {
                            role,
                            attempts: attempt + 1,
                            cause,
                        });
                    }
                    // Full jitter: uniform in [0, base * 2^attempt], capped.
                    let ceiling = BACKOFF_BASE
                        .saturating_mul(1u32 << attempt.min(8))
                        .min(BACKOFF_CAP);
                    let sleep_ms = rand::rng().random_range(0..=ceiling.as_millis() as u64);
                    log::warn!(
                        "{role:?} attempt {} failed ({cause}); retrying in {sleep_ms}ms",
                        attempt + 1
                    );
                    std::thread::sleep(Duration::from_millis(sleep_ms));
                    attempt += 1;
                }
            }
        }
    }

    fn post_json(
        &self,
        role: Role,
        url: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, RetryableError> {
        let mut req = self
            .client
            .post(url)
            .timeout(self.config(role).request_timeout())
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| RetryableError::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(RetryableError::Retry(format!("{role:?} HTTP {status}")));
        }
        if !status.is_success() {
            return Err(RetryableError::Fatal(format!("{role:?} HTTP {status}")));
        }
        resp.json::<serde_json::Value>()
            .map_err(|e| RetryableError::Retry(format!("bad JSON: {e}")))
    }
}

enum RetryableError {
    Retry(String),
    Fatal(String),
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

fn likelihood_of(choice: &ChatChoice) -> f64 {
    match choice.logprobs.as_ref().and_then(|l| l.content.as_ref()) {
        Some(tokens) if !tokens.is_empty() => {
            let mean = tokens.iter().map(|t| t.logprob).sum::<f64>() / tokens.len() as f64;
            clamp_likelihood(mean.exp())
        }
        _ => 1.0,
    }
}

impl InferenceGateway for HttpGateway {
    fn generate_steps(
        &self,
        role: GenRole,
        prefix: &str,
        n: usize,
        request_seed: u64,
    ) -> Result<Vec<GeneratedStep>, GatewayError> {
        assert!(n >= 2, "generation budget must be >= 2, got {n}");
        let backend_role = match role {
            GenRole::Policy => Role::Policy,
            GenRole::SmallPolicy => Role::SmallPolicy,
        };
        let cfg = self.config(backend_role);
        let url = format!("{}/v1/chat/completions", cfg.endpoint.trim_end_matches('/'));
        let seed = stable_hash64(&[&cfg.seed.to_le_bytes(), &request_seed.to_le_bytes()]);
        let body = serde_json::json!({
            "model": cfg.model_name,
            "messages": [ChatMessage { role: "user", content: prefix }],
            "n": n,
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_step_tokens,
            "logprobs": true,
            "stop": ["\n"],
            "seed": seed,
        });

        self.with_retries(backend_role, || {
            let value = self.post_json(backend_role, &url, &body)?;
            let parsed: ChatResponse = serde_json::from_value(value)
                .map_err(|e| RetryableError::Retry(format!("bad completion payload: {e}")))?;
            let steps: Vec<GeneratedStep> = parsed
                .choices
                .iter()
                .filter_map(|choice| {
                    let text = choice
                        .message
                        .content
                        .as_deref()
                        .unwrap_or("")
                        .trim()
                        .to_string();
                    if text.is_empty() {
                        None
                    } else {
                        Some(GeneratedStep {
                            text,
                            policy_likelihood: likelihood_of(choice),
                        })
                    }
                })
                .collect();
            if steps.len() < n {
                return Err(RetryableError::Retry(format!(
                    "{backend_role:?} returned {} usable candidates, wanted {n}",
                    steps.len()
                )));
            }
            Ok(steps.into_iter().take(n).collect())
        })
    }

    fn score_step_prm(&self, prefix: &str, step: &str) -> Result<f64, GatewayError> {
        assert!(!step.is_empty(), "cannot score an empty step");
        let cfg = self.config(Role::Prm);
        let url = format!("{}/score", cfg.endpoint.trim_end_matches('/'));
        let body = serde_json::json!({ "prefix": prefix, "step": step });
        self.with_retries(Role::Prm, || {
            let value = self.post_json(Role::Prm, &url, &body)?;
            let parsed: ScoreResponse = serde_json::from_value(value)
                .map_err(|e| RetryableError::Retry(format!("bad score payload: {e}")))?;
            Ok(clamp_unit(parsed.score))
        })
    }

    fn score_trajectory_orm(
        &self,
        problem: &Problem,
        solution_text: &str,
    ) -> Result<f64, GatewayError> {
        let cfg = self.config(Role::Orm);
        let url = format!("{}/score", cfg.endpoint.trim_end_matches('/'));
        let body = serde_json::json!({ "prefix": problem.question, "step": solution_text });
        self.with_retries(Role::Orm, || {
            let value = self.post_json(Role::Orm, &url, &body)?;
            let parsed: ScoreResponse = serde_json::from_value(value)
                .map_err(|e| RetryableError::Retry(format!("bad score payload: {e}")))?;
            Ok(clamp_unit(parsed.score))
        })
    }
}

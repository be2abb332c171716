use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Provider, ProviderError};
use crate::dist::{LogDistribution, TokenId, DEFAULT_FLOOR};

/// Smoothing factor of the wall-clock cost average.
const COST_EMA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{endpoint}/v1/logprobs`.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Retries after the first attempt on transient failures.
    #[serde(default = "default_retries")]
    pub retry_budget: u32,
    #[serde(default)]
    pub max_context: Option<usize>,
    /// Cost reported before the first measured call.
    #[serde(default = "default_cost")]
    pub initial_cost: f64,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    2
}

fn default_cost() -> f64 {
    1.0
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout_ms: default_timeout_ms(),
            retry_budget: default_retries(),
            max_context: None,
            initial_cost: default_cost(),
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    model: &'a str,
    context: &'a [TokenId],
}

#[derive(Deserialize)]
struct Response {
    logprobs: Vec<Option<f64>>,
}

/// Client for an HTTP/JSON log-prob backend.
///
/// `null` entries in the response stand for `log 0`. Values are clamped to
/// the floor and renormalized locally. The cost hint is an exponential moving
/// average of successful call latency in seconds.
#[derive(Debug)]
pub struct RemoteProvider {
    name: String,
    vocab_size: usize,
    config: RemoteConfig,
    url: String,
    agent: ureq::Agent,
    cost: Mutex<Option<f64>>,
}

enum Attempt {
    Done(LogDistribution),
    Retry(String),
    Fatal(ProviderError),
}

impl RemoteProvider {
    pub fn new(
        name: impl Into<String>,
        vocab_size: usize,
        config: RemoteConfig,
    ) -> Result<Self, ProviderError> {
        if vocab_size < 2 {
            return Err(ProviderError::InvalidParameter(
                "vocabulary needs at least 2 tokens".into(),
            ));
        }
        if !(config.initial_cost.is_finite() && config.initial_cost > 0.0) {
            return Err(ProviderError::InvalidParameter(
                "initial cost must be positive".into(),
            ));
        }
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build();
        let url = format!("{}/v1/logprobs", config.endpoint.trim_end_matches('/'));
        Ok(Self {
            name: name.into(),
            vocab_size,
            url,
            agent: ureq::Agent::new_with_config(agent_config),
            config,
            cost: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, ctx: &[TokenId]) -> Attempt {
        let body = Request {
            model: &self.config.model,
            context: ctx,
        };
        let mut resp = match self.agent.post(&self.url).send_json(&body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        if status >= 500 {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Attempt::Fatal(ProviderError::BadRequest { status, body: text });
        }
        let parsed: Response = match resp.body_mut().read_json() {
            Ok(p) => p,
            Err(ureq::Error::Json(e)) => return Attempt::Fatal(ProviderError::Protocol(e.to_string())),
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if parsed.logprobs.len() != self.vocab_size {
            return Attempt::Fatal(ProviderError::VocabMismatch {
                expected: self.vocab_size,
                actual: parsed.logprobs.len(),
            });
        }
        let logits: Vec<f64> = parsed
            .logprobs
            .iter()
            .map(|v| v.unwrap_or(DEFAULT_FLOOR).max(DEFAULT_FLOOR))
            .collect();
        match LogDistribution::softmax(&logits) {
            Ok(d) => Attempt::Done(d),
            Err(e) => Attempt::Fatal(e.into()),
        }
    }

    fn record_cost(&self, seconds: f64) {
        let mut cost = self.cost.lock().unwrap_or_else(|p| p.into_inner());
        *cost = Some(match *cost {
            None => seconds,
            Some(c) => (1.0 - COST_EMA) * c + COST_EMA * seconds,
        });
    }
}

impl Provider for RemoteProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logdist(&self, ctx: &[TokenId]) -> Result<LogDistribution, ProviderError> {
        if let Some(max) = self.config.max_context {
            if ctx.len() > max {
                return Err(ProviderError::ContextTooLong {
                    len: ctx.len(),
                    max,
                });
            }
        }
        let attempts = self.config.retry_budget.saturating_add(1);
        let mut reason = String::new();
        for _ in 0..attempts {
            let start = Instant::now();
            match self.attempt(ctx) {
                Attempt::Done(d) => {
                    self.record_cost(start.elapsed().as_secs_f64());
                    return Ok(d);
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(r) => reason = r,
            }
        }
        Err(ProviderError::BackendUnavailable {
            endpoint: self.url.clone(),
            attempts,
            reason,
        })
    }

    fn cost_hint(&self) -> f64 {
        let cost = self.cost.lock().unwrap_or_else(|p| p.into_inner());
        cost.unwrap_or(self.config.initial_cost).max(f64::MIN_POSITIVE)
    }

    fn max_context(&self) -> Option<usize> {
        self.config.max_context
    }
}

//! Token-by-token generation from a formula, and perplexity scoring.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{
    position_stream, sample_categorical, DistError, LogDistribution, SamplingPolicy, TokenId,
};
use crate::formula::{CallCounts, Formula, FormulaError, SourceCache};
use crate::providers::{Provider, ProviderError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_tokens: usize,
    /// Generation ends right after emitting any of these.
    #[serde(default)]
    pub stop: BTreeSet<TokenId>,
    #[serde(default)]
    pub policy: SamplingPolicy,
    #[serde(default)]
    pub seed: u64,
}

impl GenerationConfig {
    pub fn new(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            stop: BTreeSet::new(),
            policy: SamplingPolicy::Full,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_policy(mut self, policy: SamplingPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_stop(mut self, stop: impl IntoIterator<Item = TokenId>) -> Self {
        self.stop.extend(stop);
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_tokens == 0 {
            return Err(EngineError::InvalidConfig(
                "max_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationResult {
    /// Generated tokens, excluding the prompt.
    pub tokens: Vec<TokenId>,
    /// Log-probability of each generated token under the policy-adjusted
    /// formula distribution it was drawn from.
    pub logprobs: Vec<f64>,
    pub calls: CallCounts,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl GenerationResult {
    pub fn total_calls(&self) -> u64 {
        self.calls.values().sum()
    }

    pub fn calls_per_token(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.total_calls() as f64 / self.tokens.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(DistError),
    #[error("step {step}: {error}")]
    Step { step: usize, error: FormulaError },
    #[error("{0}")]
    Provider(ProviderError),
}

impl EngineError {
    pub(crate) fn at(step: usize) -> impl Fn(FormulaError) -> EngineError {
        move |error| EngineError::Step { step, error }
    }

    /// The provider failure behind this error, if any.
    pub fn provider_error(&self) -> Option<&ProviderError> {
        match self {
            Self::Step { error, .. } => error.provider_error(),
            Self::Provider(e) => Some(e),
            _ => None,
        }
    }
}

pub(crate) fn check_prompt(f: &Formula, prompt: &[TokenId]) -> Result<(), EngineError> {
    let size = f.vocab_size();
    match prompt.iter().find(|&&t| t as usize >= size) {
        Some(&id) => Err(EngineError::InvalidPrompt(DistError::TokenOutOfRange {
            id,
            size,
        })),
        None => Ok(()),
    }
}

/// Applies the policy and draws position `position` from its own RNG
/// stream. Returns the token and its log-probability after the policy.
pub(crate) fn draw(
    dist: &LogDistribution,
    policy: &SamplingPolicy,
    seed: u64,
    position: usize,
    attempt: u32,
) -> Result<(TokenId, f64), FormulaError> {
    let p = policy.apply(dist)?;
    let mut rng = position_stream(seed, position, 0, attempt);
    let x = sample_categorical(&p, &mut rng)?;
    Ok((x, p.log_prob(x)))
}

/// Samples up to `cfg.max_tokens` tokens after `prompt`.
pub fn generate(
    f: &Formula,
    prompt: &[TokenId],
    cfg: &GenerationConfig,
) -> Result<GenerationResult, EngineError> {
    cfg.validate()?;
    check_prompt(f, prompt)?;
    let start = Instant::now();
    let mut tokens = prompt.to_vec();
    let mut out = GenerationResult {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        calls: CallCounts::new(),
        wall_time: Duration::ZERO,
    };
    for step in 0..cfg.max_tokens {
        let mut cache = SourceCache::new();
        let dist = f
            .evaluate_with(&tokens, &mut cache, &mut out.calls)
            .map_err(EngineError::at(step))?;
        let (x, lp) = draw(&dist, &cfg.policy, cfg.seed, step, 0).map_err(EngineError::at(step))?;
        tokens.push(x);
        out.tokens.push(x);
        out.logprobs.push(lp);
        if cfg.stop.contains(&x) {
            break;
        }
    }
    out.wall_time = start.elapsed();
    Ok(out)
}

/// `exp(-mean log reference(x_k | x_<k))` over `text[prompt_len..]`, or
/// `+inf` when the reference gives an observed token probability zero.
pub fn perplexity(
    reference: &dyn Provider,
    text: &[TokenId],
    prompt_len: usize,
) -> Result<f64, EngineError> {
    if prompt_len >= text.len() {
        return Err(EngineError::InvalidConfig(format!(
            "prompt length {prompt_len} leaves no continuation in {} tokens",
            text.len()
        )));
    }
    let mut total = 0.0;
    for k in prompt_len..text.len() {
        let d = reference
            .next_logdist(&text[..k])
            .map_err(EngineError::Provider)?;
        let x = text[k];
        if x as usize >= d.len() {
            return Err(EngineError::InvalidPrompt(DistError::TokenOutOfRange {
                id: x,
                size: d.len(),
            }));
        }
        if d.is_floored(x) {
            return Ok(f64::INFINITY);
        }
        total += d.log_prob(x);
    }
    Ok((-total / (text.len() - prompt_len) as f64).exp())
}

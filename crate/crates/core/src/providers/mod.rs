//! Autoregressive distribution sources and classifiers.
//!
//! A [`Provider`] maps a context to a next-token [`LogDistribution`] and must
//! be a pure function of that context: the speculative sampler re-evaluates
//! positions during validation and relies on getting identical answers.

mod classifier;
mod ngram;
mod remote;
mod tabular;

pub use classifier::{
    classifier_induced_distribution, Classifier, FnClassifier, TabularClassifier,
    TokenSetClassifier,
};
pub use ngram::{parse_corpus, train_ngram, NgramProvider};
pub use remote::{RemoteConfig, RemoteProvider};
pub use tabular::{TabularProvider, DEFAULT_KEY_LEN};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::dist::{DistError, LogDistribution, TokenId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("classifier {name} returned {value}, outside (0, 1)")]
    ClassifierRange { name: String, value: f64 },
    #[error("backend {endpoint} unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable {
        endpoint: String,
        attempts: u32,
        reason: String,
    },
    #[error("vocabulary mismatch: expected {expected} log-probs, got {actual}")]
    VocabMismatch { expected: usize, actual: usize },
    #[error("backend rejected the request with HTTP {status}: {body}")]
    BadRequest { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("context of {len} tokens exceeds the provider limit of {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl ProviderError {
    /// True for failures of an external backend rather than of the caller.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Self::BackendUnavailable { .. }
                | Self::BadRequest { .. }
                | Self::Protocol(_)
                | Self::VocabMismatch { .. }
        )
    }
}

/// An autoregressive next-token distribution source.
pub trait Provider: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn vocab_size(&self) -> usize;

    fn next_logdist(&self, ctx: &[TokenId]) -> Result<LogDistribution, ProviderError>;

    /// Distributions for several prefixes of one sequence, `tokens[..len]`
    /// for each `len` in `prefix_lens`. Counts as a single call.
    fn next_logdists(
        &self,
        tokens: &[TokenId],
        prefix_lens: &[usize],
    ) -> Result<Vec<LogDistribution>, ProviderError> {
        prefix_lens
            .iter()
            .map(|&len| self.next_logdist(&tokens[..len]))
            .collect()
    }

    /// Relative compute per call.
    fn cost_hint(&self) -> f64 {
        1.0
    }

    /// Longest context the provider accepts, if bounded.
    fn max_context(&self) -> Option<usize> {
        None
    }
}

pub type SharedProvider = Arc<dyn Provider>;
pub type SharedClassifier = Arc<dyn Classifier>;

/// The uniform distribution, independent of context.
#[derive(Debug, Clone)]
pub struct UniformProvider {
    name: String,
    size: usize,
}

impl UniformProvider {
    pub fn new(name: impl Into<String>, size: usize) -> Self {
        Self {
            name: name.into(),
            size,
        }
    }
}

impl Provider for UniformProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab_size(&self) -> usize {
        self.size
    }

    fn next_logdist(&self, _ctx: &[TokenId]) -> Result<LogDistribution, ProviderError> {
        Ok(LogDistribution::uniform(self.size))
    }
}

/// Longest suffix of `ctx` no longer than `max_len`.
pub(crate) fn suffix(ctx: &[TokenId], max_len: usize) -> &[TokenId] {
    &ctx[ctx.len().saturating_sub(max_len)..]
}

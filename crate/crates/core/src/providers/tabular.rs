use std::collections::BTreeMap;

use super::{suffix, Provider, ProviderError};
use crate::dist::{LogDistribution, TokenId};

/// Default maximum suffix length used as a table key.
pub const DEFAULT_KEY_LEN: usize = 3;

/// Explicit context-suffix -> distribution table.
///
/// Lookup tries the longest suffix of the context (up to `key_len` tokens)
/// first and falls back to shorter suffixes, then to the default.
#[derive(Debug, Clone)]
pub struct TabularProvider {
    name: String,
    key_len: usize,
    table: BTreeMap<Vec<TokenId>, LogDistribution>,
    default: LogDistribution,
    cost: f64,
}

impl TabularProvider {
    pub fn new(name: impl Into<String>, default: LogDistribution) -> Self {
        Self {
            name: name.into(),
            key_len: DEFAULT_KEY_LEN,
            table: BTreeMap::new(),
            default,
            cost: 1.0,
        }
    }

    pub fn with_key_len(mut self, key_len: usize) -> Self {
        self.key_len = key_len;
        self
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost;
        self
    }

    pub fn insert(
        &mut self,
        context: Vec<TokenId>,
        dist: LogDistribution,
    ) -> Result<(), ProviderError> {
        if context.len() > self.key_len {
            return Err(ProviderError::InvalidParameter(format!(
                "table key of {} tokens exceeds key length {}",
                context.len(),
                self.key_len
            )));
        }
        if dist.len() != self.default.len() {
            return Err(ProviderError::VocabMismatch {
                expected: self.default.len(),
                actual: dist.len(),
            });
        }
        if let Some(&t) = context.iter().find(|&&t| t as usize >= self.default.len()) {
            return Err(ProviderError::InvalidParameter(format!(
                "table key token {t} outside the vocabulary"
            )));
        }
        self.table.insert(context, dist);
        Ok(())
    }

    pub fn with_entry(
        mut self,
        context: Vec<TokenId>,
        dist: LogDistribution,
    ) -> Result<Self, ProviderError> {
        self.insert(context, dist)?;
        Ok(self)
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<TokenId>, &LogDistribution)> {
        self.table.iter()
    }

    pub fn default_dist(&self) -> &LogDistribution {
        &self.default
    }
}

impl Provider for TabularProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab_size(&self) -> usize {
        self.default.len()
    }

    fn next_logdist(&self, ctx: &[TokenId]) -> Result<LogDistribution, ProviderError> {
        let longest = suffix(ctx, self.key_len);
        for start in 0..=longest.len() {
            if let Some(d) = self.table.get(&longest[start..]) {
                return Ok(d.clone());
            }
        }
        Ok(self.default.clone())
    }

    fn cost_hint(&self) -> f64 {
        self.cost
    }
}

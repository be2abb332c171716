use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::{suffix, ProviderError};
use crate::dist::{LogDistribution, TokenId};

/// Binary attribute classifier over token sequences.
pub trait Classifier: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Probability that `ctx` carries the attribute. Must lie strictly
    /// inside (0, 1) and depend on `ctx` only.
    fn score(&self, ctx: &[TokenId]) -> f64;

    fn cost_hint(&self) -> f64 {
        1.0
    }
}

fn checked_score(c: &dyn Classifier, ctx: &[TokenId]) -> Result<f64, ProviderError> {
    let value = c.score(ctx);
    if value > 0.0 && value < 1.0 {
        Ok(value)
    } else {
        Err(ProviderError::ClassifierRange {
            name: c.name().to_string(),
            value,
        })
    }
}

/// Token ids sorted by descending probability, ties by ascending id.
pub(crate) fn ranked_tokens(ranking: &LogDistribution) -> Vec<TokenId> {
    let logp = ranking.logp();
    let mut order: Vec<TokenId> = (0..logp.len() as TokenId).collect();
    order.sort_by(|&a, &b| {
        logp[b as usize]
            .total_cmp(&logp[a as usize])
            .then(a.cmp(&b))
    });
    order
}

/// The distribution `Q_C(x) ∝ C(ctx ⊕ x)`, scoring only the `top_k` most
/// likely tokens under `ranking` and giving every other token the prefix
/// score `C(ctx)`.
pub fn classifier_induced_distribution(
    c: &dyn Classifier,
    ctx: &[TokenId],
    top_k: usize,
    ranking: &LogDistribution,
) -> Result<LogDistribution, ProviderError> {
    if top_k == 0 {
        return Err(ProviderError::InvalidParameter(
            "classifier top_k must be at least 1".into(),
        ));
    }
    let n = ranking.len();
    let mut logits = vec![0.0; n];
    let mut extended = Vec::with_capacity(ctx.len() + 1);
    extended.extend_from_slice(ctx);
    extended.push(0);
    let order = ranked_tokens(ranking);
    let k = top_k.min(n);
    for &x in &order[..k] {
        *extended.last_mut().expect("non-empty") = x;
        logits[x as usize] = checked_score(c, &extended)?.ln();
    }
    if k < n {
        let prefix = checked_score(c, ctx)?.ln();
        for &x in &order[k..] {
            logits[x as usize] = prefix;
        }
    }
    Ok(LogDistribution::softmax(&logits)?)
}

/// Explicit suffix -> score table with longest-suffix lookup.
#[derive(Debug, Clone)]
pub struct TabularClassifier {
    name: String,
    key_len: usize,
    table: BTreeMap<Vec<TokenId>, f64>,
    default: f64,
}

impl TabularClassifier {
    pub fn new(name: impl Into<String>, default: f64) -> Self {
        Self {
            name: name.into(),
            key_len: super::tabular::DEFAULT_KEY_LEN,
            table: BTreeMap::new(),
            default,
        }
    }

    pub fn with_key_len(mut self, key_len: usize) -> Self {
        self.key_len = key_len;
        self
    }

    pub fn insert(&mut self, context: Vec<TokenId>, score: f64) -> Result<(), ProviderError> {
        if context.len() > self.key_len {
            return Err(ProviderError::InvalidParameter(format!(
                "table key of {} tokens exceeds key length {}",
                context.len(),
                self.key_len
            )));
        }
        if !(score > 0.0 && score < 1.0) {
            return Err(ProviderError::ClassifierRange {
                name: self.name.clone(),
                value: score,
            });
        }
        self.table.insert(context, score);
        Ok(())
    }

    pub fn with_entry(mut self, context: Vec<TokenId>, score: f64) -> Result<Self, ProviderError> {
        self.insert(context, score)?;
        Ok(self)
    }
}

impl Classifier for TabularClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, ctx: &[TokenId]) -> f64 {
        let longest = suffix(ctx, self.key_len);
        (0..=longest.len())
            .find_map(|start| self.table.get(&longest[start..]).copied())
            .unwrap_or(self.default)
    }
}

/// Logistic score on the fraction of context tokens drawn from a set:
/// `sigmoid(bias + weight * fraction)`. An empty context has fraction 0.
#[derive(Debug, Clone)]
pub struct TokenSetClassifier {
    name: String,
    members: Vec<bool>,
    weight: f64,
    bias: f64,
}

impl TokenSetClassifier {
    pub fn new(
        name: impl Into<String>,
        vocab_size: usize,
        tokens: &[TokenId],
        weight: f64,
        bias: f64,
    ) -> Result<Self, ProviderError> {
        if !(weight.is_finite() && bias.is_finite()) {
            return Err(ProviderError::InvalidParameter(
                "classifier weight and bias must be finite".into(),
            ));
        }
        let mut members = vec![false; vocab_size];
        for &t in tokens {
            *members.get_mut(t as usize).ok_or_else(|| {
                ProviderError::InvalidParameter(format!("token {t} outside the vocabulary"))
            })? = true;
        }
        Ok(Self {
            name: name.into(),
            members,
            weight,
            bias,
        })
    }
}

impl Classifier for TokenSetClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, ctx: &[TokenId]) -> f64 {
        let hits = ctx
            .iter()
            .filter(|&&t| self.members.get(t as usize).copied().unwrap_or(false))
            .count();
        let fraction = if ctx.is_empty() {
            0.0
        } else {
            hits as f64 / ctx.len() as f64
        };
        1.0 / (1.0 + (-(self.bias + self.weight * fraction)).exp())
    }
}

type ScoreFn = dyn Fn(&[TokenId]) -> f64 + Send + Sync;

/// Classifier backed by an arbitrary scoring closure.
#[derive(Clone)]
pub struct FnClassifier {
    name: String,
    f: Arc<ScoreFn>,
}

impl FnClassifier {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&[TokenId]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for FnClassifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnClassifier")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

impl Classifier for FnClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, ctx: &[TokenId]) -> f64 {
        (self.f)(ctx)
    }
}

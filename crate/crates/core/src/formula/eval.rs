use std::collections::{BTreeMap, HashMap};

use super::compile::{Formula, Normalization, SetOp, SourceId, SourceKey, Term, Weight};
use super::FormulaError;
use crate::dist::{LogDistribution, TokenId};
use crate::providers::classifier_induced_distribution;

/// Upper clamp on combined logits.
pub const MAX_LOGIT: f64 = 50.0;

/// Number of evaluations per provider or classifier name.
pub type CallCounts = BTreeMap<String, u64>;

type Slot = HashMap<SourceKey, LogDistribution>;

/// Fetched distributions keyed by context length.
///
/// Entries for a context of length `n` condition on the first `n` tokens of
/// the sequence being generated, so truncating the sequence to `n` tokens
/// keeps every entry with key `<= n`.
#[derive(Debug, Clone, Default)]
pub struct SourceCache {
    slots: BTreeMap<usize, Slot>,
}

impl SourceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slot(&self, prefix_len: usize) -> Option<&HashMap<SourceKey, LogDistribution>> {
        self.slots.get(&prefix_len)
    }

    pub fn contains(&self, prefix_len: usize, key: SourceKey) -> bool {
        self.slots
            .get(&prefix_len)
            .is_some_and(|s| s.contains_key(&key))
    }

    /// Drops entries for contexts longer than `max_prefix_len`.
    pub fn truncate(&mut self, max_prefix_len: usize) {
        self.slots.split_off(&(max_prefix_len + 1));
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    fn insert(&mut self, prefix_len: usize, key: SourceKey, dist: LogDistribution) {
        self.slots.entry(prefix_len).or_default().insert(key, dist);
    }
}

fn missing(key: SourceKey) -> FormulaError {
    FormulaError::Registry(format!("distribution {key:?} was not fetched"))
}

/// Static count of evaluations one `evaluate` call performs, after
/// deduplicating shared sources. Supersede groups count their authoritative
/// side only.
pub fn count_provider_calls(f: &Formula) -> CallCounts {
    let mut counts = CallCounts::new();
    for key in f.all_keys() {
        *counts.entry(f.key_name(key).to_string()).or_default() += 1;
    }
    counts
}

impl Formula {
    /// Every distribution a full evaluation reads, providers first.
    pub fn all_keys(&self) -> Vec<SourceKey> {
        let mut providers = Vec::new();
        let mut classifiers = Vec::new();
        for u in 0..self.units.len() {
            for key in self.unit_keys(u) {
                let list = match key {
                    SourceKey::Provider(_) => &mut providers,
                    SourceKey::Classifier { .. } => &mut classifiers,
                };
                if !list.contains(&key) {
                    list.push(key);
                }
            }
        }
        providers.extend(classifiers);
        providers
    }

    /// Fetches `keys` for each context `tokens[..len]`, `len` in
    /// `prefix_lens`, skipping cached entries. Each key with anything
    /// missing costs one batched call, recorded in `calls`.
    pub fn fetch(
        &self,
        keys: &[SourceKey],
        tokens: &[TokenId],
        prefix_lens: &[usize],
        cache: &mut SourceCache,
        calls: &mut CallCounts,
    ) -> Result<(), FormulaError> {
        for &key in keys {
            let todo: Vec<usize> = prefix_lens
                .iter()
                .copied()
                .filter(|&len| !cache.contains(len, key))
                .collect();
            if todo.is_empty() {
                continue;
            }
            let name = self.key_name(key).to_string();
            let wrap = |error| FormulaError::Provider {
                name: name.clone(),
                error,
            };
            match key {
                SourceKey::Provider(i) => {
                    let provider = &self.providers[i];
                    let dists = provider.next_logdists(tokens, &todo).map_err(wrap)?;
                    if dists.len() != todo.len() {
                        return Err(FormulaError::Registry(format!(
                            "provider `{name}` returned {} distributions for {} contexts",
                            dists.len(),
                            todo.len()
                        )));
                    }
                    for (len, d) in todo.iter().zip(dists) {
                        if d.len() != self.vocab_size {
                            return Err(wrap(crate::providers::ProviderError::VocabMismatch {
                                expected: self.vocab_size,
                                actual: d.len(),
                            }));
                        }
                        cache.insert(*len, key, d);
                    }
                }
                SourceKey::Classifier { index, top_k } => {
                    let classifier = &self.classifiers[index];
                    for &len in &todo {
                        let uniform;
                        let ranking = match self.ranking {
                            SourceId::Provider(i) => cache
                                .slot(len)
                                .and_then(|s| s.get(&SourceKey::Provider(i)))
                                .ok_or_else(|| missing(SourceKey::Provider(i)))?,
                            _ => {
                                uniform = LogDistribution::uniform(self.vocab_size);
                                &uniform
                            }
                        };
                        let d = classifier_induced_distribution(
                            classifier.as_ref(),
                            &tokens[..len],
                            top_k,
                            ranking,
                        )
                        .map_err(wrap)?;
                        cache.insert(len, key, d);
                    }
                }
            }
            *calls.entry(name).or_default() += 1;
        }
        Ok(())
    }

    fn log_q<'a>(
        &self,
        source: SourceId,
        dists: &'a HashMap<SourceKey, LogDistribution>,
    ) -> Result<LogQ<'a>, FormulaError> {
        match source {
            SourceId::Provider(i) => dists
                .get(&SourceKey::Provider(i))
                .map(|d| LogQ::Dense(d.logp()))
                .ok_or_else(|| missing(SourceKey::Provider(i))),
            SourceId::Uniform => Ok(LogQ::Constant(-(self.vocab_size as f64).ln())),
            SourceId::Classifier(_) => Err(FormulaError::Registry(
                "classifier used as a plain source".into(),
            )),
        }
    }

    /// `f'(x)` of a non-classifier, non-balance term.
    fn term_weight(
        &self,
        t: &Term,
        dists: &HashMap<SourceKey, LogDistribution>,
    ) -> Result<Vec<f64>, FormulaError> {
        let n = self.vocab_size;
        match t.weight {
            Weight::Ones => Ok(vec![1.0; n]),
            Weight::Indicator { op, first, other } => {
                let mine = self.log_q(t.source, dists)?;
                let theirs = self.log_q(other, dists)?;
                Ok((0..n)
                    .map(|x| {
                        let (q1, q2) = if first {
                            (mine.at(x), theirs.at(x))
                        } else {
                            (theirs.at(x), mine.at(x))
                        };
                        let i1 = q1 > q2;
                        let takes_i1 = matches!((op, first), (SetOp::Union, true) | (SetOp::Intersection, false));
                        if i1 == takes_i1 {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect())
            }
            Weight::Classifier { .. } | Weight::Balance => Ok(vec![0.0; n]),
        }
    }

    #[cfg(test)]
    pub(crate) fn term_weight_for_test(
        &self,
        t: &Term,
        dists: &HashMap<SourceKey, LogDistribution>,
    ) -> Vec<f64> {
        self.term_weight(t, dists).unwrap()
    }

    fn contribution(
        &self,
        terms: &[Term],
        scale: f64,
        dists: &HashMap<SourceKey, LogDistribution>,
    ) -> Result<Vec<f64>, FormulaError> {
        let n = self.vocab_size;
        let mut acc = vec![0.0; n];
        let mut balance = None;
        let mut others = vec![0.0; n];
        for (i, t) in terms.iter().enumerate() {
            let lambda = t.coefficient * scale;
            match (t.weight, t.source) {
                (Weight::Classifier { top_k }, SourceId::Classifier(index)) => {
                    let key = SourceKey::Classifier {
                        index,
                        top_k: top_k.unwrap_or(self.top_k),
                    };
                    let qc = dists.get(&key).ok_or_else(|| missing(key))?;
                    let log_u = -(n as f64).ln();
                    for (a, &l) in acc.iter_mut().zip(qc.logp()) {
                        *a += lambda * (l - log_u);
                    }
                }
                (Weight::Balance, _) => balance = Some(i),
                _ => {
                    let w = self.term_weight(t, dists)?;
                    let q = self.log_q(t.source, dists)?;
                    for x in 0..n {
                        let f = lambda * w[x];
                        others[x] += f;
                        acc[x] += f * q.at(x);
                    }
                }
            }
        }
        if let Some(i) = balance {
            let t = &terms[i];
            let lambda = t.coefficient * scale;
            let q = self.log_q(t.source, dists)?;
            for x in 0..n {
                acc[x] += (lambda - others[x]) * q.at(x);
            }
        }
        Ok(acc)
    }

    /// `Σ λ_i f'_i(x) log Q_i(x)` over the authoritative terms of `unit`.
    pub fn unit_contribution(
        &self,
        unit: usize,
        ctx: &[TokenId],
        dists: &HashMap<SourceKey, LogDistribution>,
    ) -> Result<Vec<f64>, FormulaError> {
        self.contribution(&self.units[unit].terms, self.scale(unit, ctx), dists)
    }

    /// Same sum over the proposal terms of a supersede unit.
    pub fn proposal_contribution(
        &self,
        unit: usize,
        ctx: &[TokenId],
        dists: &HashMap<SourceKey, LogDistribution>,
    ) -> Result<Vec<f64>, FormulaError> {
        self.contribution(&self.units[unit].proposal, self.scale(unit, ctx), dists)
    }

    /// Weight sum `S = Σ λ_i f'_i(x)`, which is the same at every token by
    /// construction: a union or intersection pair always sums to its `λ`, a
    /// classifier pair to zero and a rebalanced formula to `λ_1`.
    pub fn weight_sum(&self, ctx: &[TokenId]) -> f64 {
        (0..self.units.len())
            .map(|u| self.unit_weight_sum(u, ctx))
            .sum()
    }

    /// Share of [`Formula::weight_sum`] contributed by one unit.
    pub fn unit_weight_sum(&self, unit: usize, ctx: &[TokenId]) -> f64 {
        self.scale(unit, ctx) * terms_weight_sum(&self.units[unit].terms)
    }

    /// Weight sum of the proposal terms of a supersede unit.
    pub fn proposal_weight_sum(&self, unit: usize, ctx: &[TokenId]) -> f64 {
        self.scale(unit, ctx) * terms_weight_sum(&self.units[unit].proposal)
    }

    /// `S(x)` computed token by token from the actual weights.
    pub fn token_weight_sums(
        &self,
        ctx: &[TokenId],
        dists: &HashMap<SourceKey, LogDistribution>,
    ) -> Result<Vec<f64>, FormulaError> {
        let n = self.vocab_size;
        let mut total = vec![0.0; n];
        for (u, unit) in self.units.iter().enumerate() {
            let scale = self.scale(u, ctx);
            let mut unit_sum = vec![0.0; n];
            let mut balance = None;
            for t in &unit.terms {
                if t.weight == Weight::Balance {
                    balance = Some(t.coefficient * scale);
                    continue;
                }
                let w = self.term_weight(t, dists)?;
                for x in 0..n {
                    unit_sum[x] += t.coefficient * scale * w[x];
                }
            }
            for x in 0..n {
                total[x] += match balance {
                    Some(l1) => l1,
                    None => unit_sum[x],
                };
            }
        }
        Ok(total)
    }

    /// Turns a summed contribution into logits: divides by `S` in
    /// `kl_optimal` mode, then clamps to `[floor, MAX_LOGIT]`.
    pub fn finalize_logits(
        &self,
        ctx: &[TokenId],
        logits: Vec<f64>,
    ) -> Result<Vec<f64>, FormulaError> {
        let s = match self.mode {
            Normalization::KlOptimal => {
                let s = self.weight_sum(ctx);
                if !(s.is_finite() && s > 0.0) {
                    return Err(FormulaError::NormalizationViolation(format!("S = {s}")));
                }
                Some(s)
            }
            Normalization::Raw => None,
        };
        Ok(self.clamp_logits(logits, s))
    }

    fn clamp_logits(&self, mut logits: Vec<f64>, divisor: Option<f64>) -> Vec<f64> {
        if let Some(s) = divisor {
            for v in &mut logits {
                *v /= s;
            }
        }
        for v in &mut logits {
            *v = if v.is_nan() {
                self.floor
            } else {
                v.clamp(self.floor, MAX_LOGIT)
            };
        }
        logits
    }

    /// Like [`Formula::finalize`] for a sum over a subset of the formula
    /// whose weights add up to `partial_weight`. In `kl_optimal` mode the
    /// sum is divided by `partial_weight` when that is positive, so a subset
    /// of terms is normalized like a formula of its own.
    pub fn finalize_partial(
        &self,
        ctx: &[TokenId],
        logits: Vec<f64>,
        partial_weight: f64,
    ) -> Result<LogDistribution, FormulaError> {
        if self.mode == Normalization::KlOptimal && partial_weight.is_finite() && partial_weight > 0.0 {
            let logits = self.clamp_logits(logits, Some(partial_weight));
            return Ok(LogDistribution::softmax_with_floor(&logits, self.floor)?);
        }
        self.finalize(ctx, logits)
    }

    /// Softmax of [`Formula::finalize_logits`].
    pub fn finalize(
        &self,
        ctx: &[TokenId],
        logits: Vec<f64>,
    ) -> Result<LogDistribution, FormulaError> {
        let logits = self.finalize_logits(ctx, logits)?;
        Ok(LogDistribution::softmax_with_floor(&logits, self.floor)?)
    }

    fn summed(
        &self,
        tokens: &[TokenId],
        cache: &mut SourceCache,
        calls: &mut CallCounts,
    ) -> Result<Vec<f64>, FormulaError> {
        let len = tokens.len();
        self.fetch(&self.all_keys(), tokens, &[len], cache, calls)?;
        let empty = HashMap::new();
        let dists = cache.slot(len).unwrap_or(&empty);
        let mut acc = vec![0.0; self.vocab_size];
        for u in 0..self.units.len() {
            let c = self.unit_contribution(u, tokens, dists)?;
            for (a, v) in acc.iter_mut().zip(c) {
                *a += v;
            }
        }
        if self.mode == Normalization::KlOptimal {
            let s = self.weight_sum(tokens);
            let per_token = self.token_weight_sums(tokens, dists)?;
            let tol = 1e-9 * s.abs().max(1.0);
            if let Some(bad) = per_token.iter().find(|&&v| (v - s).abs() > tol) {
                return Err(FormulaError::NormalizationViolation(format!(
                    "S varies across tokens ({s} vs {bad})"
                )));
            }
        }
        Ok(acc)
    }

    /// The next-token distribution after `tokens`, reusing `cache` and
    /// recording provider calls.
    pub fn evaluate_with(
        &self,
        tokens: &[TokenId],
        cache: &mut SourceCache,
        calls: &mut CallCounts,
    ) -> Result<LogDistribution, FormulaError> {
        let acc = self.summed(tokens, cache, calls)?;
        self.finalize(tokens, acc)
    }

    /// The next-token distribution after `ctx`.
    pub fn evaluate(&self, ctx: &[TokenId]) -> Result<LogDistribution, FormulaError> {
        self.evaluate_with(ctx, &mut SourceCache::new(), &mut CallCounts::new())
    }

    /// Clamped logits whose softmax is [`Formula::evaluate`].
    pub fn combined_logits(&self, ctx: &[TokenId]) -> Result<Vec<f64>, FormulaError> {
        let acc = self.summed(ctx, &mut SourceCache::new(), &mut CallCounts::new())?;
        self.finalize_logits(ctx, acc)
    }
}

fn terms_weight_sum(terms: &[Term]) -> f64 {
    if let Some(b) = terms.iter().find(|t| t.weight == Weight::Balance) {
        return b.coefficient;
    }
    terms
        .iter()
        .map(|t| match t.weight {
            Weight::Ones | Weight::Indicator { first: true, .. } => t.coefficient,
            _ => 0.0,
        })
        .sum()
}

enum LogQ<'a> {
    Dense(&'a [f64]),
    Constant(f64),
}

impl LogQ<'_> {
    fn at(&self, x: usize) -> f64 {
        match self {
            LogQ::Dense(v) => v[x],
            LogQ::Constant(c) => *c,
        }
    }
}

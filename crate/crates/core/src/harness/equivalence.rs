use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::stats::chi_square_gof;
use super::HarnessError;
use crate::dist::{mix_keys, TokenId};
use crate::engine::{EngineError, GenerationConfig};
use crate::formula::Formula;
use crate::speculative::{speculative_generate_with, ResidualRule, SpeculativeError, SpeculativeFactors};

/// Significance level of a single equivalence test.
pub const P_THRESHOLD: f64 = 0.001;

/// Fewest samples [`equivalence_test`] accepts.
pub const MIN_EQUIVALENCE_SAMPLES: usize = 10_000;

/// Largest number of sequences [`exact_sequence_law`] enumerates.
const MAX_ENUMERATION: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub statistic: f64,
    pub p_value: f64,
    pub dof: usize,
    pub merged_bins: usize,
    pub samples: usize,
    pub threshold: f64,
    pub pass: bool,
}

/// `n` speculative generations of `len` tokens after `prompt`, run in
/// parallel; sample `i` uses a seed derived from `(seed, i)`.
pub fn sample_sequences(
    f: &Formula,
    prompt: &[TokenId],
    factors: &SpeculativeFactors,
    len: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>, SpeculativeError> {
    sample_sequences_with(f, prompt, factors, len, n, seed, ResidualRule::Clamp)
}

#[doc(hidden)]
pub fn sample_sequences_with(
    f: &Formula,
    prompt: &[TokenId],
    factors: &SpeculativeFactors,
    len: usize,
    n: usize,
    seed: u64,
    rule: ResidualRule,
) -> Result<Vec<Vec<TokenId>>, SpeculativeError> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let cfg = GenerationConfig::new(len).with_seed(mix_keys(&[seed, i as u64]));
            speculative_generate_with(f, prompt, factors, &cfg, rule).map(|r| r.result.tokens)
        })
        .collect()
}

/// Chi-square test of the first token of `n_samples` speculative runs
/// against `f.evaluate(prompt)`, passing when `p > 0.001`.
pub fn equivalence_test(
    f: &Formula,
    prompt: &[TokenId],
    n_samples: usize,
    factors: &SpeculativeFactors,
) -> Result<EquivalenceReport, HarnessError> {
    equivalence_test_with(f, prompt, n_samples, factors, 0, P_THRESHOLD, ResidualRule::Clamp)
}

/// [`equivalence_test`] with an explicit seed and threshold.
#[doc(hidden)]
pub fn equivalence_test_with(
    f: &Formula,
    prompt: &[TokenId],
    n_samples: usize,
    factors: &SpeculativeFactors,
    seed: u64,
    threshold: f64,
    rule: ResidualRule,
) -> Result<EquivalenceReport, HarnessError> {
    if n_samples < MIN_EQUIVALENCE_SAMPLES {
        return Err(HarnessError::InvalidSpec(format!(
            "equivalence tests need at least {MIN_EQUIVALENCE_SAMPLES} samples, got {n_samples}"
        )));
    }
    let target = f
        .evaluate(prompt)
        .map_err(|e| SpeculativeError::Engine(EngineError::at(0)(e)))?;
    // Running past the first token lets later validations revisit it.
    let len = factors.as_slice().iter().copied().max().unwrap_or(1);
    let samples = sample_sequences_with(f, prompt, factors, len, n_samples, seed, rule)?;
    let mut counts = vec![0u64; f.vocab_size()];
    for s in &samples {
        counts[s[0] as usize] += 1;
    }
    let r = chi_square_gof(&counts, &target.probs());
    Ok(EquivalenceReport {
        statistic: r.statistic,
        p_value: r.p_value,
        dof: r.dof,
        merged_bins: r.merged_bins,
        samples: n_samples,
        threshold,
        pass: r.p_value > threshold,
    })
}

/// Exact probability of every continuation of length `len` under plain
/// generation from `f`.
pub fn exact_sequence_law(
    f: &Formula,
    prompt: &[TokenId],
    len: usize,
) -> Result<BTreeMap<Vec<TokenId>, f64>, HarnessError> {
    let n = f.vocab_size();
    if n.checked_pow(len as u32).map_or(true, |c| c > MAX_ENUMERATION) {
        return Err(HarnessError::InvalidSpec(format!(
            "{n}^{len} sequences are too many to enumerate"
        )));
    }
    let mut law = BTreeMap::from([(Vec::new(), 1.0)]);
    for step in 0..len {
        let mut next = BTreeMap::new();
        for (seq, p) in law {
            if p == 0.0 {
                continue;
            }
            let ctx = [prompt, &seq[..]].concat();
            let d = f
                .evaluate(&ctx)
                .map_err(|e| SpeculativeError::Engine(EngineError::at(step)(e)))?;
            for (x, q) in d.probs().into_iter().enumerate() {
                if q > 0.0 {
                    let mut s = seq.clone();
                    s.push(x as TokenId);
                    next.insert(s, p * q);
                }
            }
        }
        law = next;
    }
    Ok(law)
}

/// Total variation between the empirical law of `samples` and `law`.
pub fn empirical_tv(samples: &[Vec<TokenId>], law: &BTreeMap<Vec<TokenId>, f64>) -> f64 {
    let mut freq: BTreeMap<&[TokenId], f64> = BTreeMap::new();
    let w = 1.0 / samples.len() as f64;
    for s in samples {
        *freq.entry(s.as_slice()).or_default() += w;
    }
    let mut tv = 0.0;
    for (seq, &p) in law {
        tv += (freq.remove(seq.as_slice()).unwrap_or(0.0) - p).abs();
    }
    tv += freq.values().sum::<f64>();
    tv / 2.0
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::super::fixtures::{bundled_registry, exactness_fixtures, FIXTURE_PROMPT};
    use super::*;
    use crate::dist::LogDistribution;
    use crate::formula::{parse_formula, Registry};
    use crate::providers::TabularProvider;

    #[test]
    fn unit_factors_pass() {
        let r = bundled_registry();
        let f = parse_formula("M - 0.5*B", &r).unwrap();
        let rep = equivalence_test(&f, &FIXTURE_PROMPT, 20_000, &SpeculativeFactors::ones(&f)).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn corrupted_residual_fails() {
        let r = bundled_registry();
        let fx = &exactness_fixtures()[1];
        let (f, s) = fx.compile(&r);
        let good = equivalence_test_with(&f, &FIXTURE_PROMPT, 20_000, &s, 1, P_THRESHOLD, ResidualRule::Clamp).unwrap();
        assert!(good.pass, "{good:?}");
        let bad = equivalence_test_with(&f, &FIXTURE_PROMPT, 20_000, &s, 1, P_THRESHOLD, ResidualRule::Absolute).unwrap();
        assert!(!bad.pass, "{bad:?}");
    }

    #[test]
    fn point_mass_passes_trivially() {
        let m = TabularProvider::new("P", LogDistribution::point_mass(3, 1));
        let r = Registry::new(3).with_provider(std::sync::Arc::new(m)).unwrap();
        let f = parse_formula("P", &r).unwrap();
        let s = SpeculativeFactors::new(&f, vec![2]).unwrap();
        let rep = equivalence_test(&f, &[0], 10_000, &s).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.dof, 0);
        assert!(equivalence_test(&f, &[0], 9_999, &s).is_err());
    }

    #[test]
    fn exact_law_sums_to_one() {
        let r = bundled_registry();
        let f = parse_formula("M + 0.5*B", &r).unwrap();
        let law = exact_sequence_law(&f, &FIXTURE_PROMPT, 3).unwrap();
        assert_eq!(law.len(), 27);
        assert_abs_diff_eq!(law.values().sum::<f64>(), 1.0, epsilon = 1e-12);
        let p012 = f.evaluate(&[0]).unwrap().prob(0)
            * f.evaluate(&[0, 0]).unwrap().prob(1)
            * f.evaluate(&[0, 0, 1]).unwrap().prob(2);
        assert_abs_diff_eq!(law[&vec![0, 1, 2]], p012, epsilon = 1e-15);
        assert!(exact_sequence_law(&f, &[0], 40).is_err());
    }

    #[test]
    fn empirical_tv_counts_unlisted_sequences() {
        let law = BTreeMap::from([(vec![0], 0.5), (vec![1], 0.5)]);
        assert_abs_diff_eq!(empirical_tv(&[vec![0], vec![1]], &law), 0.0);
        assert_abs_diff_eq!(empirical_tv(&[vec![0], vec![2]], &law), 0.5);
    }
}

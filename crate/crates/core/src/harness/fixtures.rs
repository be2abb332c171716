//! Small deterministic providers and formulas used by the bundled suites.

use std::sync::Arc;

use crate::dist::{LogDistribution, RngStream, TokenId};
use crate::formula::{parse_formula, Formula, Normalization, Registry};
use crate::providers::{TabularProvider, TokenSetClassifier};
use crate::speculative::SpeculativeFactors;

/// A formula with the speculative factors it is exercised under.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub name: &'static str,
    pub formula: &'static str,
    pub mode: Normalization,
    pub factors: &'static [usize],
}

impl Fixture {
    pub fn compile(&self, registry: &Registry) -> (Formula, SpeculativeFactors) {
        let f = parse_formula(self.formula, registry)
            .expect("fixture formula compiles")
            .with_mode(self.mode);
        let s = SpeculativeFactors::new(&f, self.factors.to_vec()).expect("fixture factors are valid");
        (f, s)
    }
}

/// Random distribution over `n` tokens; larger `skew` concentrates mass.
pub fn random_distribution(rng: &mut RngStream, n: usize, skew: i32) -> LogDistribution {
    let w: Vec<f64> = (0..n).map(|_| 0.02 + rng.next_f64().powi(skew)).collect();
    LogDistribution::from_probs(&w).expect("weights are positive")
}

/// Provider over `n` tokens with a random distribution for every context
/// suffix of length up to `key_len`.
pub fn random_tabular(name: &str, n: usize, key_len: usize, seed: u64, skew: i32) -> TabularProvider {
    let mut rng = RngStream::new(seed, 0);
    let mut t = TabularProvider::new(name, random_distribution(&mut rng, n, skew)).with_key_len(key_len);
    let mut keys: Vec<Vec<TokenId>> = vec![Vec::new()];
    for _ in 0..key_len {
        keys = keys
            .iter()
            .flat_map(|k| {
                (0..n as TokenId).map(move |x| {
                    let mut k = k.clone();
                    k.push(x);
                    k
                })
            })
            .collect();
        for k in &keys {
            t.insert(k.clone(), random_distribution(&mut rng, n, skew))
                .expect("fixture entry is valid");
        }
    }
    t
}

/// `base` mixed with a random distribution per context, weight `noise` on
/// the latter.
pub fn perturbed(name: &str, base: &TabularProvider, noise: f64, seed: u64) -> TabularProvider {
    let mut rng = RngStream::new(seed, 1);
    let n = base.default_dist().len();
    let mix = |d: &LogDistribution, rng: &mut RngStream| {
        let r = random_distribution(rng, n, 1).probs();
        let p: Vec<f64> = d
            .probs()
            .iter()
            .zip(r)
            .map(|(a, b)| (1.0 - noise) * a + noise * b)
            .collect();
        LogDistribution::from_probs(&p).expect("mixture is normalized")
    };
    let mut t = TabularProvider::new(name, mix(base.default_dist(), &mut rng)).with_key_len(base.key_len());
    let mut entries: Vec<_> = base.entries().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    for (k, d) in entries {
        t.insert(k.clone(), mix(d, &mut rng)).expect("fixture entry is valid");
    }
    t
}

/// Vocabulary size of [`bundled_registry`].
pub const FIXTURE_VOCAB: usize = 3;

/// Prompt used with [`bundled_registry`].
pub const FIXTURE_PROMPT: [TokenId; 1] = [0];

/// Providers `M`, `A` (a close cheap copy of `M`), `B`, `N` and the
/// classifier `C` over three tokens.
pub fn bundled_registry() -> Registry {
    let n = FIXTURE_VOCAB;
    let m = random_tabular("M", n, 2, 101, 2).with_cost(4.0);
    let a = perturbed("A", &m, 0.3, 102).with_cost(1.0);
    let b = random_tabular("B", n, 2, 103, 3).with_cost(4.0);
    let nn = random_tabular("N", n, 1, 104, 1).with_cost(4.0);
    let c = TokenSetClassifier::new("C", n, &[1], 2.5, -1.0).expect("valid classifier");
    Registry::new(n)
        .with_provider(Arc::new(m))
        .and_then(|r| r.with_provider(Arc::new(a)))
        .and_then(|r| r.with_provider(Arc::new(b)))
        .and_then(|r| r.with_provider(Arc::new(nn)))
        .and_then(|r| r.with_classifier(Arc::new(c)))
        .expect("fixture registry is valid")
}

/// Ten formulas covering linear terms, set operators, supersede and mixes.
pub fn exactness_fixtures() -> Vec<Fixture> {
    use Normalization::*;
    vec![
        Fixture { name: "linear", formula: "M + 0.5*B", mode: Raw, factors: &[1, 2] },
        Fixture { name: "negative", formula: "M - 0.6*N", mode: Raw, factors: &[1, 3] },
        Fixture { name: "union", formula: "union(M, B)", mode: Raw, factors: &[3] },
        Fixture { name: "linear_union", formula: "M + 0.8*union(A, B)", mode: Raw, factors: &[1, 2] },
        Fixture { name: "intersection", formula: "intersection(M, A) + 0.3*B", mode: Raw, factors: &[2, 3] },
        Fixture { name: "supersede", formula: "supersede(A, M)", mode: Raw, factors: &[3] },
        Fixture { name: "supersede_linear", formula: "supersede(A, M) - 0.5*N", mode: Raw, factors: &[2, 4] },
        Fixture { name: "kl_optimal", formula: "M + A + 2*B", mode: KlOptimal, factors: &[1, 2, 3] },
        Fixture { name: "classifier", formula: "M + 0.7*B + classifier(C)", mode: Raw, factors: &[1, 2, 1] },
        Fixture {
            name: "mixed",
            formula: "supersede(A, M) + 0.4*intersection(B, N) - 0.3*union(N, A)",
            mode: Raw,
            factors: &[2, 3, 4],
        },
    ]
}

/// Base model `M` and attribute model `Ma` over eight tokens, for sweeps
/// over the strength of `Ma`.
pub fn difficulty_registry() -> Registry {
    let m = random_tabular("M", 8, 1, 201, 2);
    let ma = perturbed("Ma", &m, 0.8, 202);
    Registry::new(8)
        .with_provider(Arc::new(m))
        .and_then(|r| r.with_provider(Arc::new(ma)))
        .expect("fixture registry is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::Provider;

    #[test]
    fn fixtures_compile_and_are_deterministic() {
        let r = bundled_registry();
        for fx in exactness_fixtures() {
            let (f, s) = fx.compile(&r);
            assert_eq!(s.as_slice().len(), f.units().len(), "{}", fx.name);
            assert!(!s.is_trivial());
        }
        let a = random_tabular("X", 3, 2, 7, 2);
        let b = random_tabular("X", 3, 2, 7, 2);
        assert_eq!(a.next_logdist(&[1, 2]).unwrap(), b.next_logdist(&[1, 2]).unwrap());
        assert_ne!(a.next_logdist(&[1, 2]).unwrap(), a.next_logdist(&[2, 1]).unwrap());
        assert_eq!(exactness_fixtures().len(), 10);
    }
}

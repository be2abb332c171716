//! Workloads shared by the benchmarks.

use std::sync::Arc;

use model_arith::formula::{parse_formula, Formula, Registry};
use model_arith::harness::fixtures::{perturbed, random_tabular};
use model_arith::speculative::{CalibrationConfig, SpeculativeFactors, TuningReport};

/// A base model `M`, a cheap close copy `A` and an unrelated model `B` over
/// `vocab` tokens, conditioned on the previous token.
pub fn registry(vocab: usize) -> Registry {
    let m = random_tabular("M", vocab, 1, 11, 2).with_cost(4.0);
    let a = perturbed("A", &m, 0.1, 12).with_cost(1.0);
    let b = random_tabular("B", vocab, 1, 13, 3).with_cost(4.0);
    Registry::new(vocab)
        .with_provider(Arc::new(m))
        .and_then(|r| r.with_provider(Arc::new(a)))
        .and_then(|r| r.with_provider(Arc::new(b)))
        .expect("bench registry is valid")
}

pub fn formula(src: &str, registry: &Registry) -> Formula {
    parse_formula(src, registry).expect("bench formula compiles")
}

/// Factors tuned on a short calibration run.
pub fn tuned_factors(f: &Formula) -> SpeculativeFactors {
    let prompts = (0..4).map(|x| vec![x]).collect();
    let cal = CalibrationConfig::new(prompts, 8, 32);
    TuningReport::tune(f, &cal, 16).expect("tuning succeeds").1
}

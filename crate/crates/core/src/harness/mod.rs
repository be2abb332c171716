//! Experiment runner: attribute-strength sweeps, distribution-equivalence
//! tests for speculative sampling, and brute-force oracle checks.

mod equivalence;
pub mod fixtures;
mod oracles;
mod stats;
mod suites;
mod sweep;

pub use equivalence::{
    empirical_tv, equivalence_test, exact_sequence_law, sample_sequences, EquivalenceReport,
    MIN_EQUIVALENCE_SAMPLES, P_THRESHOLD,
};
#[doc(hidden)]
pub use equivalence::{equivalence_test_with, sample_sequences_with};
pub use oracles::{
    check_attribute_transfer, check_classifier, check_set_operator_masses,
    check_set_operator_objective, check_weighted_kl, grid_minimize_3, minimize_on_simplex,
    weighted_kl_value, OracleCheck, TransferFixture,
};
pub use stats::{chi_square_gof, mean_stderr, ChiSquareResult, MIN_EXPECTED};
pub use suites::{run_suite, Suite, SuiteOptions, SuiteReport};
pub use sweep::{
    instantiate_template, run_sweep, AttributeScorer, ClassifierScorer, Metric, PromptSpec,
    Report, ReportMetadata, ReportRow, ScorerSpec, Speculation, SweepSpec, WordLengthScorer,
};

use thiserror::Error;

use crate::dist::DistError;
use crate::engine::EngineError;
use crate::formula::FormulaError;
use crate::providers::ProviderError;
use crate::speculative::SpeculativeError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TemplateError {
    #[error("slot `{slot}` is used in the template but has no values")]
    Unresolved { slot: String },
    #[error("slot `{slot}` has values but does not appear in the template")]
    Unused { slot: String },
    #[error("malformed template: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid sweep: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Speculative(#[from] SpeculativeError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl HarnessError {
    /// True when the failure came from a model backend rather than from
    /// the caller's input.
    pub fn is_backend(&self) -> bool {
        let provider = match self {
            Self::Formula(e) => e.provider_error(),
            Self::Engine(e) => e.provider_error(),
            Self::Speculative(SpeculativeError::Engine(e)) => e.provider_error(),
            Self::Provider(e) => Some(e),
            _ => None,
        };
        provider.is_some_and(|p| p.is_backend())
    }
}

//! Formula language, compilation into weighted terms, and evaluation.
//!
//! A formula denotes the distribution
//! `P(x) ∝ exp(Σ_i λ_i f'_i(x) log Q_i(x))`, where `f'_i` is `1` for plain
//! terms, a 0/1 indicator for the two halves of `union`/`intersection`, and
//! where a classifier term contributes `λ (log Q_C − log U)`.
//!
//! Two normalization modes exist. [`Normalization::Raw`] applies the softmax
//! to the weighted log-sum directly, matching how composed formulas such as
//! `M - 0.96*union(Mtox, M)` are normally used. [`Normalization::KlOptimal`]
//! first divides by the weight sum `S = Σ_i λ_i f'_i(x)`, giving the
//! minimizer of `Σ_i D_KL^{f_i}(P || Q_i)`. It requires `S` to be constant
//! and positive; for the formula above `S = 0.04`, which would sharpen the
//! result by a factor of 25.

mod ast;
mod compile;
mod eval;
mod parser;
mod presets;

pub use ast::{Atom, Expr, Span, TermExpr};
pub use compile::{
    Formula, Normalization, Registry, SetOp, SourceId, SourceKey, Term, Unit, UnitKind, Weight,
    DEFAULT_TOP_K,
};
pub use eval::{count_provider_calls, CallCounts, SourceCache, MAX_LOGIT};
pub use parser::{parse_expr, KEYWORDS};
pub use presets::{attribute_transfer_rewrite, preset, Preset};

use thiserror::Error;

use crate::dist::DistError;
use crate::providers::ProviderError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormulaError {
    #[error("parse error at {span}: {message}")]
    Parse { span: Span, message: String },
    #[error("unknown identifier `{name}` at {span}")]
    Name { name: String, span: Span },
    #[error("unsupported composition at {span}: {message}")]
    UnsupportedComposition { span: Span, message: String },
    #[error(
        "normalization violation: kl_optimal mode needs a constant, positive weight sum \
         S = Σ λ_i f'_i(x) ({0}); rebalance the formula or use raw mode"
    )]
    NormalizationViolation(String),
    #[error("cannot rebalance: {0}")]
    RebalanceUnsupported(String),
    #[error("preset `{preset}` takes {expected}, got {got}")]
    PresetArity {
        preset: String,
        expected: String,
        got: String,
    },
    #[error("invalid registry: {0}")]
    Registry(String),
    #[error("{name}: {error}")]
    Provider { name: String, error: ProviderError },
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl FormulaError {
    pub(crate) fn parse(span: Span, message: impl Into<String>) -> Self {
        Self::Parse {
            span,
            message: message.into(),
        }
    }

    pub(crate) fn unsupported(span: Span, message: impl Into<String>) -> Self {
        Self::UnsupportedComposition {
            span,
            message: message.into(),
        }
    }

    /// Source location, for errors that have one.
    pub fn span(&self) -> Option<Span> {
        match self {
            Self::Parse { span, .. }
            | Self::Name { span, .. }
            | Self::UnsupportedComposition { span, .. } => Some(*span),
            _ => None,
        }
    }

    /// The underlying provider failure, if any.
    pub fn provider_error(&self) -> Option<&ProviderError> {
        match self {
            Self::Provider { error, .. } => Some(error),
            _ => None,
        }
    }
}

/// Parses and compiles `src` against `registry` in raw mode.
pub fn parse_formula(src: &str, registry: &Registry) -> Result<Formula, FormulaError> {
    Formula::compile(&parse_expr(src)?, registry)
}

#[cfg(test)]
mod tests;

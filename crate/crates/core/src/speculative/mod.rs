//! Speculative sampling over the units of a formula.
//!
//! Each top-level unit `u` of a formula gets a speculative factor `s_u`. A
//! unit with `s_u = 1` is evaluated at every position; a unit with a larger
//! factor lets up to `s_u − 1` tokens be drawn without it and then checks all
//! of them in one batched call. Checking uses the accept/resample rule of
//! [`speculative_step`], so the generated sequence has exactly the law of
//! non-speculative generation.

mod generate;
mod tune;

pub use generate::{
    call_statistics, speculative_generate, speculative_generate_with, CallStatistics,
    SpeculativeRun, UnitStatistics,
};
pub use tune::{
    cost_per_token, estimate_acceptance, estimate_acceptances, optimal_factor,
    optimal_factor_ternary, tune_factors, AcceptanceEstimate, CalibrationConfig, CostModel,
    TermReport, TuningOutcome, TuningReport, UnitCost, DEFAULT_S_MAX,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{sample_weights, DistError, LogDistribution, RngStream, TokenId};
use crate::engine::EngineError;
use crate::formula::{Formula, UnitKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpeculativeError {
    #[error("factor mismatch: {0}")]
    FactorMismatch(String),
    #[error("residual distribution max(p_val - p_gen, 0) has no mass")]
    DegenerateResidual,
    #[error("calibration needs at least one prompt and one sample")]
    CalibrationEmpty,
    #[error("invalid tuning input: {0}")]
    InvalidTuning(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Per-unit speculative factors, indexed like [`Formula::units`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeculativeFactors(Vec<usize>);

impl SpeculativeFactors {
    /// No speculation: every unit is evaluated at every position.
    pub fn ones(f: &Formula) -> Self {
        Self(vec![1; f.units().len()])
    }

    pub fn new(f: &Formula, factors: Vec<usize>) -> Result<Self, SpeculativeError> {
        if factors.len() != f.units().len() {
            return Err(SpeculativeError::FactorMismatch(format!(
                "formula has {} units, got {} factors",
                f.units().len(),
                factors.len()
            )));
        }
        for (u, (&s, unit)) in factors.iter().zip(f.units()).enumerate() {
            if s == 0 {
                return Err(SpeculativeError::FactorMismatch(format!(
                    "factor of unit {u} ({}) must be at least 1",
                    unit.label
                )));
            }
            if unit.kind == UnitKind::Classifier && s != 1 {
                return Err(SpeculativeError::FactorMismatch(format!(
                    "classifier unit {u} ({}) only permits a factor of 1",
                    unit.label
                )));
            }
        }
        Ok(Self(factors))
    }

    /// Factors from a tuning report whose terms must match the formula's
    /// units by position and label.
    pub fn from_report(f: &Formula, report: &TuningReport) -> Result<Self, SpeculativeError> {
        if report.terms.len() != f.units().len() {
            return Err(SpeculativeError::FactorMismatch(format!(
                "report lists {} terms, formula has {} units",
                report.terms.len(),
                f.units().len()
            )));
        }
        for (t, unit) in report.terms.iter().zip(f.units()) {
            if t.name != unit.label {
                return Err(SpeculativeError::FactorMismatch(format!(
                    "report term `{}` does not match unit `{}`",
                    t.name, unit.label
                )));
            }
        }
        Self::new(f, report.terms.iter().map(|t| t.s).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_trivial(&self) -> bool {
        self.0.iter().all(|&s| s == 1)
    }
}

/// Outcome of validating one proposed token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Accepted(TokenId),
    Resampled(TokenId),
}

impl StepOutcome {
    pub fn token(self) -> TokenId {
        match self {
            Self::Accepted(t) | Self::Resampled(t) => t,
        }
    }

    pub fn is_accepted(self) -> bool {
        matches!(self, Self::Accepted(_))
    }
}

/// How the rejection residual is formed. Only `Clamp` is correct; the other
/// variant exists so tests can check that a broken sampler is detected.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualRule {
    #[default]
    Clamp,
    Absolute,
}

/// Accepts `proposed` (drawn from `p_gen`) with probability
/// `min(1, p_val(x) / p_gen(x))`, otherwise resamples from
/// `max(p_val − p_gen, 0)` renormalized. The returned token is distributed
/// according to `p_val`.
pub fn speculative_step(
    p_gen: &LogDistribution,
    p_val: &LogDistribution,
    proposed: TokenId,
    rng: &mut RngStream,
) -> Result<StepOutcome, SpeculativeError> {
    speculative_step_with(p_gen, p_val, proposed, rng, ResidualRule::Clamp)
}

#[doc(hidden)]
pub fn speculative_step_with(
    p_gen: &LogDistribution,
    p_val: &LogDistribution,
    proposed: TokenId,
    rng: &mut RngStream,
    rule: ResidualRule,
) -> Result<StepOutcome, SpeculativeError> {
    if p_gen.len() != p_val.len() {
        return Err(DistError::LengthMismatch {
            expected: p_gen.len(),
            actual: p_val.len(),
        }
        .into());
    }
    if proposed as usize >= p_gen.len() {
        return Err(DistError::TokenOutOfRange {
            id: proposed,
            size: p_gen.len(),
        }
        .into());
    }
    let pg = p_gen.prob(proposed);
    let pv = p_val.prob(proposed);
    let accept = if pg > 0.0 {
        (pv / pg).min(1.0)
    } else if pv > 0.0 {
        1.0
    } else {
        0.0
    };
    if rng.next_f64() < accept {
        return Ok(StepOutcome::Accepted(proposed));
    }
    let g = p_gen.probs();
    let v = p_val.probs();
    let residual: Vec<f64> = g
        .iter()
        .zip(&v)
        .map(|(a, b)| match rule {
            ResidualRule::Clamp => (b - a).max(0.0),
            ResidualRule::Absolute => (b - a).abs(),
        })
        .collect();
    sample_weights(&residual, rng)
        .map(StepOutcome::Resampled)
        .ok_or(SpeculativeError::DegenerateResidual)
}

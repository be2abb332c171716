use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{SpeculativeError, SpeculativeFactors};
use crate::dist::{total_variation, SamplingPolicy, TokenId};
use crate::engine::{check_prompt, generate, EngineError, GenerationConfig};
use crate::formula::{CallCounts, Formula, FormulaError, SourceCache, UnitKind};

/// Largest factor the tuner considers by default.
pub const DEFAULT_S_MAX: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub prompts: Vec<Vec<TokenId>>,
    /// Number of calibration generations, cycling through `prompts`.
    pub samples: usize,
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub policy: SamplingPolicy,
}

impl CalibrationConfig {
    pub fn new(prompts: Vec<Vec<TokenId>>, samples: usize, max_tokens: usize) -> Self {
        Self {
            prompts,
            samples,
            max_tokens,
            seed: 0,
            policy: SamplingPolicy::Full,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Estimated probability that a token drawn without a unit survives its
/// validation: the mean of `1 − TV(P_without, P_full)` over every position
/// visited while generating the calibration samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AcceptanceEstimate {
    pub label: String,
    pub acceptance: f64,
    pub positions: usize,
}

/// Acceptance estimates for every unit of `f`.
pub fn estimate_acceptances(
    f: &Formula,
    cal: &CalibrationConfig,
) -> Result<Vec<AcceptanceEstimate>, SpeculativeError> {
    if cal.prompts.is_empty() || cal.samples == 0 {
        return Err(SpeculativeError::CalibrationEmpty);
    }
    for p in &cal.prompts {
        check_prompt(f, p)?;
    }
    let n_units = f.units().len();
    let mut sums = vec![0.0; n_units];
    let mut positions = 0usize;
    for s in 0..cal.samples {
        let prompt = &cal.prompts[s % cal.prompts.len()];
        let cfg = GenerationConfig::new(cal.max_tokens)
            .with_seed(cal.seed.wrapping_add(s as u64))
            .with_policy(cal.policy.clone());
        let out = generate(f, prompt, &cfg)?;
        let mut tokens = prompt.clone();
        for (i, &x) in out.tokens.iter().enumerate() {
            let tv = unit_divergences(f, &tokens, &cal.policy).map_err(EngineError::at(i))?;
            for (acc, d) in sums.iter_mut().zip(tv) {
                *acc += 1.0 - d;
            }
            positions += 1;
            tokens.push(x);
        }
    }
    Ok(f.units()
        .iter()
        .zip(sums)
        .map(|(unit, sum)| AcceptanceEstimate {
            label: unit.label.clone(),
            acceptance: if positions == 0 { 1.0 } else { (sum / positions as f64).clamp(0.0, 1.0) },
            positions,
        })
        .collect())
}

/// Acceptance estimate for the single unit `unit`.
pub fn estimate_acceptance(
    f: &Formula,
    unit: usize,
    cal: &CalibrationConfig,
) -> Result<AcceptanceEstimate, SpeculativeError> {
    if unit >= f.units().len() {
        return Err(SpeculativeError::FactorMismatch(format!(
            "formula has no unit {unit}"
        )));
    }
    Ok(estimate_acceptances(f, cal)?.swap_remove(unit))
}

/// `TV(P_without_u, P_full)` after `ctx` for every unit `u`.
fn unit_divergences(
    f: &Formula,
    ctx: &[TokenId],
    policy: &SamplingPolicy,
) -> Result<Vec<f64>, FormulaError> {
    let mut cache = SourceCache::new();
    let mut calls = CallCounts::new();
    let len = ctx.len();
    let n_units = f.units().len();
    let mut keys = f.all_keys();
    for u in 0..n_units {
        for k in f.proposal_keys(u) {
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    f.fetch(&keys, ctx, &[len], &mut cache, &mut calls)?;
    let empty = HashMap::new();
    let dists = cache.slot(len).unwrap_or(&empty);
    let full: Vec<Vec<f64>> = (0..n_units)
        .map(|u| f.unit_contribution(u, ctx, dists))
        .collect::<Result<_, _>>()?;
    let sum = |parts: &mut dyn Iterator<Item = &Vec<f64>>| {
        let mut acc = vec![0.0; f.vocab_size()];
        for p in parts {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        acc
    };
    let target = policy.apply(&f.finalize(ctx, sum(&mut full.iter()))?)?;
    (0..n_units)
        .map(|u| {
            let mut weight: f64 = (0..n_units)
                .filter(|&v| v != u)
                .map(|v| f.unit_weight_sum(v, ctx))
                .sum();
            let proposal = if f.units()[u].kind == UnitKind::Supersede {
                weight += f.proposal_weight_sum(u, ctx);
                Some(f.proposal_contribution(u, ctx, dists)?)
            } else {
                None
            };
            let mut parts = full
                .iter()
                .enumerate()
                .filter_map(|(v, c)| if v == u { proposal.as_ref() } else { Some(c) });
            let without = policy.apply(&f.finalize_partial(ctx, sum(&mut parts), weight)?)?;
            Ok(total_variation(&without, &target)?)
        })
        .collect()
}

/// Expected cost per emitted token with factor `s`:
/// `(c_big + s·c_small) / Σ_{t<s} a^t`.
pub fn cost_per_token(a: f64, c_small: f64, c_big: f64, s: usize) -> f64 {
    let expected: f64 = (0..s).map(|t| a.powi(t as i32)).sum();
    (c_big + s as f64 * c_small) / expected
}

fn check_inputs(a: f64, c_small: f64, c_big: f64, s_max: usize) -> Result<(), SpeculativeError> {
    if !(0.0..=1.0).contains(&a) {
        return Err(SpeculativeError::InvalidTuning(format!(
            "acceptance {a} is outside [0, 1]"
        )));
    }
    if !(c_small.is_finite() && c_small >= 0.0 && c_big.is_finite() && c_big >= 0.0) {
        return Err(SpeculativeError::InvalidTuning(format!(
            "costs must be finite and non-negative, got {c_small} and {c_big}"
        )));
    }
    if s_max == 0 {
        return Err(SpeculativeError::InvalidTuning("s_max must be at least 1".into()));
    }
    Ok(())
}

/// The factor in `1..=s_max` minimizing [`cost_per_token`], preferring the
/// smaller factor on ties.
pub fn optimal_factor(
    a: f64,
    c_small: f64,
    c_big: f64,
    s_max: usize,
) -> Result<usize, SpeculativeError> {
    check_inputs(a, c_small, c_big, s_max)?;
    let mut best = (1, cost_per_token(a, c_small, c_big, 1));
    for s in 2..=s_max {
        let c = cost_per_token(a, c_small, c_big, s);
        if c < best.1 {
            best = (s, c);
        }
    }
    Ok(best.0)
}

/// Ternary search over `1..=s_max`. The cost is unimodal in `s`, so this
/// agrees with [`optimal_factor`].
pub fn optimal_factor_ternary(
    a: f64,
    c_small: f64,
    c_big: f64,
    s_max: usize,
) -> Result<usize, SpeculativeError> {
    check_inputs(a, c_small, c_big, s_max)?;
    let cost = |s| cost_per_token(a, c_small, c_big, s);
    let (mut lo, mut hi) = (1, s_max);
    while hi - lo > 2 {
        let m1 = lo + (hi - lo) / 3;
        let m2 = hi - (hi - lo) / 3;
        if cost(m1) <= cost(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let mut best = lo;
    for s in lo + 1..=hi {
        if cost(s) < cost(best) {
            best = s;
        }
    }
    Ok(best)
}

/// Evaluation costs of one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCost {
    pub name: String,
    /// Cost of evaluating the unit.
    pub cost: f64,
    /// Cost of producing a token without it: the proposal of a supersede
    /// unit, otherwise the first unit.
    pub proposal_cost: f64,
    /// Units that are never speculated.
    pub pinned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub units: Vec<UnitCost>,
}

impl CostModel {
    /// Costs from the providers' cost hints. Classifier units, and the first
    /// unit unless it is a supersede, are pinned to a factor of 1.
    pub fn from_formula(f: &Formula) -> Self {
        let base = if f.units().is_empty() {
            0.0
        } else {
            f.keys_cost(&f.unit_keys(0))
        };
        let units = f
            .units()
            .iter()
            .enumerate()
            .map(|(u, unit)| {
                let supersede = unit.kind == UnitKind::Supersede;
                UnitCost {
                    name: unit.label.clone(),
                    cost: f.keys_cost(&f.unit_keys(u)),
                    proposal_cost: if supersede {
                        f.keys_cost(&f.proposal_keys(u))
                    } else {
                        base
                    },
                    pinned: unit.kind == UnitKind::Classifier || (u == 0 && !supersede),
                }
            })
            .collect();
        Self { units }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningOutcome {
    pub factors: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Picks a factor per unit from acceptance estimates and costs.
pub fn tune_factors(
    estimates: &[AcceptanceEstimate],
    costs: &CostModel,
    s_max: usize,
) -> Result<TuningOutcome, SpeculativeError> {
    if estimates.len() != costs.units.len() {
        return Err(SpeculativeError::FactorMismatch(format!(
            "{} acceptance estimates for {} units",
            estimates.len(),
            costs.units.len()
        )));
    }
    let mut factors = Vec::with_capacity(estimates.len());
    let mut warnings = Vec::new();
    for (e, c) in estimates.iter().zip(&costs.units) {
        if c.pinned {
            factors.push(1);
            continue;
        }
        let s = optimal_factor(e.acceptance, c.proposal_cost, c.cost, s_max)?;
        if e.acceptance >= 1.0 && s_max > 1 {
            warnings.push(format!(
                "{}: every calibration token was accepted, so the factor is capped at s_max = {s_max}",
                c.name
            ));
        }
        factors.push(s);
    }
    Ok(TuningOutcome { factors, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub name: String,
    pub a: f64,
    pub cost: f64,
    pub s: usize,
}

/// Serializable result of a tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub terms: Vec<TermReport>,
    pub calibration_prompts: usize,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TuningReport {
    pub fn new(
        estimates: &[AcceptanceEstimate],
        costs: &CostModel,
        outcome: &TuningOutcome,
        cal: &CalibrationConfig,
    ) -> Self {
        Self {
            terms: estimates
                .iter()
                .zip(&costs.units)
                .zip(&outcome.factors)
                .map(|((e, c), &s)| TermReport {
                    name: c.name.clone(),
                    a: e.acceptance,
                    cost: c.cost,
                    s,
                })
                .collect(),
            calibration_prompts: cal.prompts.len(),
            samples: cal.samples,
            warnings: outcome.warnings.clone(),
        }
    }

    /// Calibrates and tunes `f` in one go.
    pub fn tune(
        f: &Formula,
        cal: &CalibrationConfig,
        s_max: usize,
    ) -> Result<(Self, SpeculativeFactors, Vec<String>), SpeculativeError> {
        let estimates = estimate_acceptances(f, cal)?;
        let costs = CostModel::from_formula(f);
        let outcome = tune_factors(&estimates, &costs, s_max)?;
        let report = Self::new(&estimates, &costs, &outcome, cal);
        let factors = SpeculativeFactors::new(f, outcome.factors)?;
        Ok((report, factors, outcome.warnings))
    }
}

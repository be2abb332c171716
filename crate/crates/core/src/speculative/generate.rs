use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::Serialize;

use super::{speculative_step_with, ResidualRule, SpeculativeError, SpeculativeFactors};
use crate::dist::{position_stream, LogDistribution, TokenId};
use crate::engine::{check_prompt, draw, EngineError, GenerationConfig, GenerationResult};
use crate::formula::{CallCounts, Formula, FormulaError, SourceCache, UnitKind};

/// Per-unit bookkeeping of a speculative run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitStatistics {
    pub label: String,
    pub factor: usize,
    /// Batched evaluations of the unit.
    pub fires: u64,
    /// Tokens the unit checked after they were drawn without it.
    pub validated: u64,
    pub accepted: u64,
}

impl UnitStatistics {
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.validated > 0).then(|| self.accepted as f64 / self.validated as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeculativeRun {
    pub result: GenerationResult,
    pub units: Vec<UnitStatistics>,
    pub rejections: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallStatistics {
    pub tokens: usize,
    pub calls_per_token: BTreeMap<String, f64>,
    pub total_calls_per_token: f64,
    pub units: Vec<UnitStatistics>,
}

/// Calls per generated token, by provider name and in total.
pub fn call_statistics(run: &SpeculativeRun) -> CallStatistics {
    let n = run.result.tokens.len().max(1) as f64;
    CallStatistics {
        tokens: run.result.tokens.len(),
        calls_per_token: run
            .result
            .calls
            .iter()
            .map(|(k, &v)| (k.clone(), v as f64 / n))
            .collect(),
        total_calls_per_token: run.result.total_calls() as f64 / n,
        units: run.units.clone(),
    }
}

/// Generates like [`crate::engine::generate`], evaluating unit `u` only
/// every `factors[u]` positions and validating the tokens drawn without it.
/// With all factors equal to 1 the output is identical to plain generation.
pub fn speculative_generate(
    f: &Formula,
    prompt: &[TokenId],
    factors: &SpeculativeFactors,
    cfg: &GenerationConfig,
) -> Result<SpeculativeRun, SpeculativeError> {
    speculative_generate_with(f, prompt, factors, cfg, ResidualRule::Clamp)
}

#[doc(hidden)]
pub fn speculative_generate_with(
    f: &Formula,
    prompt: &[TokenId],
    factors: &SpeculativeFactors,
    cfg: &GenerationConfig,
    rule: ResidualRule,
) -> Result<SpeculativeRun, SpeculativeError> {
    cfg.validate()?;
    check_prompt(f, prompt)?;
    let factors = SpeculativeFactors::new(f, factors.as_slice().to_vec())?;
    let start = Instant::now();
    let mut run = Run::new(f, prompt, factors.as_slice(), cfg, rule);
    run.execute()?;
    let logprobs = run.final_logprobs()?;
    let rejections = run.rejections;
    let units = run.stats;
    Ok(SpeculativeRun {
        result: GenerationResult {
            tokens: run.tokens[run.prompt_len..].to_vec(),
            logprobs,
            calls: run.calls,
            wall_time: start.elapsed(),
        },
        units,
        rejections,
    })
}

/// How unit `u` enters the state at a position being validated by it.
#[derive(Clone, Copy)]
enum Validating {
    Without(usize),
    With(usize),
}

struct Run<'a> {
    f: &'a Formula,
    cfg: &'a GenerationConfig,
    rule: ResidualRule,
    factors: &'a [usize],
    prompt_len: usize,
    tokens: Vec<TokenId>,
    /// `computed[u][i]`: contribution of unit `u` at generated position `i`.
    computed: Vec<Vec<Vec<f64>>>,
    proposals: Vec<BTreeMap<usize, Vec<f64>>>,
    cache: SourceCache,
    calls: CallCounts,
    /// Fresh draws made at each position so far; never truncated.
    attempts: Vec<u32>,
    order: Vec<usize>,
    stats: Vec<UnitStatistics>,
    rejections: u64,
}

impl<'a> Run<'a> {
    fn new(
        f: &'a Formula,
        prompt: &[TokenId],
        factors: &'a [usize],
        cfg: &'a GenerationConfig,
        rule: ResidualRule,
    ) -> Self {
        let n = f.units().len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&u| (factors[u], u));
        Self {
            f,
            cfg,
            rule,
            factors,
            prompt_len: prompt.len(),
            tokens: prompt.to_vec(),
            computed: vec![Vec::new(); n],
            proposals: vec![BTreeMap::new(); n],
            cache: SourceCache::new(),
            calls: CallCounts::new(),
            attempts: Vec::new(),
            order,
            stats: f
                .units()
                .iter()
                .zip(factors)
                .map(|(u, &s)| UnitStatistics {
                    label: u.label.clone(),
                    factor: s,
                    fires: 0,
                    validated: 0,
                    accepted: 0,
                })
                .collect(),
            rejections: 0,
        }
    }

    fn len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    fn pending(&self, u: usize) -> usize {
        self.len() - self.computed[u].len()
    }

    fn finished(&self) -> bool {
        let len = self.len();
        len >= self.cfg.max_tokens
            || (len > 0 && self.cfg.stop.contains(&self.tokens[self.tokens.len() - 1]))
    }

    fn ctx(&self, position: usize) -> &[TokenId] {
        &self.tokens[..self.prompt_len + position]
    }

    fn execute(&mut self) -> Result<(), SpeculativeError> {
        loop {
            if self.finished() {
                let mut flush: Vec<(usize, usize)> = self
                    .order
                    .iter()
                    .enumerate()
                    .filter(|&(_, &u)| self.pending(u) > 0)
                    .map(|(rank, &u)| (self.computed[u].len() + self.factors[u] - 1, rank))
                    .collect();
                flush.sort_unstable();
                let mut rejected = false;
                for (_, rank) in flush {
                    if self.fire(self.order[rank], false)? {
                        rejected = true;
                        break;
                    }
                }
                if !rejected {
                    return Ok(());
                }
                continue;
            }
            let mut rejected = false;
            for i in 0..self.order.len() {
                let u = self.order[i];
                if self.pending(u) + 1 >= self.factors[u] && self.fire(u, true)? {
                    rejected = true;
                    break;
                }
            }
            if rejected {
                continue;
            }
            self.sample_next()?;
        }
    }

    fn sample_next(&mut self) -> Result<(), SpeculativeError> {
        let pos = self.len();
        let dist = self.state(pos, None)?;
        if self.attempts.len() <= pos {
            self.attempts.resize(pos + 1, 0);
        }
        let attempt = self.attempts[pos];
        self.attempts[pos] += 1;
        let (x, _) = draw(&dist, &NO_POLICY, self.cfg.seed, pos, attempt)
            .map_err(EngineError::at(pos))?;
        self.tokens.push(x);
        Ok(())
    }

    /// Evaluates unit `u` at every position it has not computed (and at the
    /// next, undrawn position when `include_next`), then validates the drawn
    /// ones in order. Returns whether a token was resampled.
    fn fire(&mut self, u: usize, include_next: bool) -> Result<bool, SpeculativeError> {
        let start = self.computed[u].len();
        let len = self.len();
        let end = if include_next { len + 1 } else { len };
        let prefix_lens: Vec<usize> = (start..end).map(|i| self.prompt_len + i).collect();
        let f = self.f;
        f.fetch(
            &f.unit_keys(u),
            &self.tokens,
            &prefix_lens,
            &mut self.cache,
            &mut self.calls,
        )
        .map_err(EngineError::at(start))?;
        for i in start..end {
            let c = self.contribution(u, i, false)?;
            self.computed[u].push(c);
        }
        self.stats[u].fires += 1;

        for j in start..len {
            let old = self.state(j, Some(Validating::Without(u)))?;
            let new = self.state(j, Some(Validating::With(u)))?;
            let attempt = self.attempts[j] - 1;
            let mut rng = position_stream(self.cfg.seed, j, 1 + u, attempt);
            let x = self.tokens[self.prompt_len + j];
            self.stats[u].validated += 1;
            let outcome = speculative_step_with(&old, &new, x, &mut rng, self.rule)?;
            if outcome.is_accepted() {
                self.stats[u].accepted += 1;
                continue;
            }
            self.tokens[self.prompt_len + j] = outcome.token();
            self.truncate(j + 1);
            self.rejections += 1;
            return Ok(true);
        }
        Ok(false)
    }

    /// Keeps the first `n` generated tokens and everything that conditions
    /// only on them.
    fn truncate(&mut self, n: usize) {
        self.tokens.truncate(self.prompt_len + n);
        for c in &mut self.computed {
            c.truncate(n);
        }
        for p in &mut self.proposals {
            p.split_off(&n);
        }
        self.cache.truncate(self.prompt_len + n - 1);
    }

    /// Contribution of unit `u` (or of its proposal) at position `i`, read
    /// from the cache.
    fn contribution(&self, u: usize, i: usize, proposal: bool) -> Result<Vec<f64>, SpeculativeError> {
        let ctx = self.ctx(i);
        let empty = HashMap::new();
        let dists = self.cache.slot(ctx.len()).unwrap_or(&empty);
        let c = if proposal {
            self.f.proposal_contribution(u, ctx, dists)
        } else {
            self.f.unit_contribution(u, ctx, dists)
        };
        Ok(c.map_err(EngineError::at(i))?)
    }

    fn proposal(&mut self, u: usize, i: usize) -> Result<&[f64], SpeculativeError> {
        if !self.proposals[u].contains_key(&i) {
            let f = self.f;
            let len = self.prompt_len + i;
            f.fetch(
                &f.proposal_keys(u),
                &self.tokens,
                &[len],
                &mut self.cache,
                &mut self.calls,
            )
            .map_err(EngineError::at(i))?;
            let c = self.contribution(u, i, true)?;
            self.proposals[u].insert(i, c);
        }
        Ok(&self.proposals[u][&i])
    }

    /// Policy-adjusted distribution at position `i` from the units computed
    /// there, with supersede units that are not yet computed represented by
    /// their proposals.
    fn state(&mut self, i: usize, validating: Option<Validating>) -> Result<LogDistribution, SpeculativeError> {
        let n = self.f.vocab_size();
        let mut acc = vec![0.0; n];
        let mut weight = 0.0;
        let mut complete = true;
        for v in 0..self.f.units().len() {
            let computed = match validating {
                Some(Validating::Without(u)) if u == v => false,
                Some(Validating::With(u)) if u == v => true,
                _ => self.computed[v].len() > i,
            };
            let add: &[f64] = if computed {
                weight += self.f.unit_weight_sum(v, self.ctx(i));
                &self.computed[v][i]
            } else if self.f.units()[v].kind == UnitKind::Supersede {
                complete = false;
                weight += self.f.proposal_weight_sum(v, self.ctx(i));
                self.proposal(v, i)?
            } else {
                complete = false;
                continue;
            };
            for (a, c) in acc.iter_mut().zip(add) {
                *a += c;
            }
        }
        let ctx = self.ctx(i);
        let d = if complete {
            self.f.finalize(ctx, acc)
        } else {
            self.f.finalize_partial(ctx, acc, weight)
        }
        .map_err(EngineError::at(i))?;
        self.cfg
            .policy
            .apply(&d)
            .map_err(|e| EngineError::at(i)(FormulaError::Dist(e)).into())
    }

    fn final_logprobs(&mut self) -> Result<Vec<f64>, SpeculativeError> {
        (0..self.len())
            .map(|i| {
                let d = self.state(i, None)?;
                Ok(d.log_prob(self.tokens[self.prompt_len + i]))
            })
            .collect()
    }
}

/// The state is already policy-adjusted when drawn from.
const NO_POLICY: crate::dist::SamplingPolicy = crate::dist::SamplingPolicy::Full;

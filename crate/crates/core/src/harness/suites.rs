use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::equivalence::{empirical_tv, equivalence_test_with, exact_sequence_law, sample_sequences};
use super::fixtures::{bundled_registry, exactness_fixtures, random_distribution, FIXTURE_PROMPT};
use super::oracles::{
    check_attribute_transfer, check_classifier, check_set_operator_masses,
    check_set_operator_objective, check_weighted_kl,
};
use super::{HarnessError, P_THRESHOLD};
use crate::dist::{mix_keys, total_variation, RngStream};
use crate::speculative::{speculative_step, ResidualRule};

/// Length of the sequences compared against the exact joint law.
const JOINT_LEN: usize = 3;

const JOINT_TV: f64 = 0.01;

const ACCEPTANCE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Exactness,
    Oracles,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exactness" => Ok(Self::Exactness),
            "oracles" => Ok(Self::Oracles),
            "all" => Ok(Self::All),
            other => Err(format!("unknown suite `{other}`")),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exactness => "exactness",
            Self::Oracles => "oracles",
            Self::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteOptions {
    /// First-token samples per fixture, and trials per acceptance pair.
    pub samples: usize,
    /// Sequences per fixture for the joint-law comparison.
    pub joint_samples: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            samples: 100_000,
            joint_samples: 200_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// The statistic compared against `threshold`.
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub options: SuiteOptions,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

fn at_most(name: String, value: f64, threshold: f64) -> CheckResult {
    CheckResult {
        name,
        value,
        threshold,
        pass: value <= threshold,
    }
}

/// Runs the bundled checks. Exactness tests use a Bonferroni-corrected
/// threshold across the fixtures.
pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<SuiteReport, HarnessError> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Exactness | Suite::All) {
        checks.extend(exactness(opts)?);
        checks.push(acceptance_rate(20, opts.samples, opts.seed));
    }
    if matches!(suite, Suite::Oracles | Suite::All) {
        for c in [
            check_weighted_kl(100, opts.seed)?,
            check_set_operator_masses(1000, opts.seed)?,
            check_set_operator_objective(20, opts.seed)?,
            check_classifier(20, opts.seed)?,
            check_attribute_transfer(20, opts.seed)?,
        ] {
            checks.push(at_most(format!("oracles/{}", c.name), c.worst, c.tolerance));
        }
    }
    Ok(SuiteReport {
        suite,
        options: opts.clone(),
        pass: checks.iter().all(|c| c.pass),
        checks,
    })
}

fn exactness(opts: &SuiteOptions) -> Result<Vec<CheckResult>, HarnessError> {
    let registry = bundled_registry();
    let fixtures = exactness_fixtures();
    let threshold = P_THRESHOLD / fixtures.len() as f64;
    let mut checks = Vec::new();
    for (i, fx) in fixtures.iter().enumerate() {
        let (f, s) = fx.compile(&registry);
        let seed = mix_keys(&[opts.seed, i as u64]);
        let rep = equivalence_test_with(
            &f,
            &FIXTURE_PROMPT,
            opts.samples,
            &s,
            seed,
            threshold,
            ResidualRule::Clamp,
        )?;
        checks.push(CheckResult {
            name: format!("exactness/{}/first_token_p", fx.name),
            value: rep.p_value,
            threshold,
            pass: rep.pass,
        });
        let law = exact_sequence_law(&f, &FIXTURE_PROMPT, JOINT_LEN)?;
        let len = s.as_slice().iter().copied().max().unwrap_or(1).max(JOINT_LEN);
        let seqs: Vec<_> = sample_sequences(&f, &FIXTURE_PROMPT, &s, len, opts.joint_samples, seed ^ 1)?
            .into_iter()
            .map(|mut v| {
                v.truncate(JOINT_LEN);
                v
            })
            .collect();
        checks.push(at_most(
            format!("exactness/{}/joint_tv", fx.name),
            empirical_tv(&seqs, &law),
            JOINT_TV,
        ));
    }
    Ok(checks)
}

/// Largest gap between the empirical acceptance frequency of
/// [`speculative_step`] and `1 − TV` over `pairs` random proposal/target
/// pairs, `trials` steps each.
pub(crate) fn acceptance_rate(pairs: usize, trials: usize, seed: u64) -> CheckResult {
    let worst = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, mix_keys(&[20, i as u64]));
            let n = 2 + (rng.next_u64() % 6) as usize;
            let old = random_distribution(&mut rng, n, 2);
            let new = random_distribution(&mut rng, n, 2);
            let expected = 1.0 - total_variation(&old, &new).expect("same support size");
            let mut accepted = 0usize;
            for _ in 0..trials {
                let x = crate::dist::sample_categorical(&old, &mut rng).expect("normalized");
                if speculative_step(&old, &new, x, &mut rng)
                    .expect("residual is non-degenerate")
                    .is_accepted()
                {
                    accepted += 1;
                }
            }
            (accepted as f64 / trials as f64 - expected).abs()
        })
        .reduce(|| 0.0, f64::max);
    at_most("acceptance_rate".into(), worst, ACCEPTANCE_TOLERANCE)
}

//! Brute-force minimizers of the objectives whose closed-form solutions the
//! formula evaluator implements, and checks comparing the two.

use std::sync::Arc;

use serde::Serialize;

use super::fixtures::random_distribution;
use super::HarnessError;
use crate::dist::{total_variation, LogDistribution, RngStream, TokenId};
use crate::formula::{
    attribute_transfer_rewrite, parse_expr, parse_formula, Formula, Normalization, Registry,
};
use crate::providers::{TabularClassifier, TabularProvider};

/// Minimizes a smooth objective over the open probability simplex by
/// gradient descent on softmax parameters with a backtracking line search.
/// `gradient` returns the partial derivatives with respect to `p`.
pub fn minimize_on_simplex(
    n: usize,
    objective: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Vec<f64> {
    let softmax = |z: &[f64]| {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let mut z = vec![0.0; n];
    let mut p = softmax(&z);
    let mut value = objective(&p);
    let mut step = 1.0;
    for _ in 0..max_iter {
        let g = gradient(&p);
        let mean: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let gz: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a * (b - mean)).collect();
        let norm2: f64 = gz.iter().map(|v| v * v).sum();
        if norm2.sqrt() < tol {
            break;
        }
        step *= 2.0;
        loop {
            let cand: Vec<f64> = z.iter().zip(&gz).map(|(a, b)| a - step * b).collect();
            let q = softmax(&cand);
            let v = objective(&q);
            if v <= value - 0.5 * step * norm2 {
                if v >= value {
                    return q;
                }
                z = cand;
                p = q;
                value = v;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                // Rounding noise dominates the decrease; p is as good as it gets.
                return p;
            }
        }
    }
    p
}

/// Minimizes `objective` over the 3-token simplex on successively finer
/// grids centred on the previous best point, down to spacing `resolution`.
pub fn grid_minimize_3(objective: impl Fn(&[f64]) -> f64, resolution: f64) -> [f64; 3] {
    let mut best = [1.0 / 3.0; 3];
    let mut best_v = objective(&best);
    let mut h = 0.01;
    let mut radius = 1.0;
    while h >= resolution {
        let steps = (radius / h).ceil() as i64;
        let (c0, c1) = (best[0], best[1]);
        for i in -steps..=steps {
            for j in -steps..=steps {
                let p0 = c0 + i as f64 * h;
                let p1 = c1 + j as f64 * h;
                let p2 = 1.0 - p0 - p1;
                if p0 < 0.0 || p1 < 0.0 || p2 < -1e-15 {
                    continue;
                }
                let p = [p0, p1, p2.max(0.0)];
                let v = objective(&p);
                if v < best_v {
                    best_v = v;
                    best = p;
                }
            }
        }
        radius = 3.0 * h;
        h /= 10.0;
    }
    best
}

/// `Σ_x w(x) p(x) log(p(x) / q(x))`, with `0 log 0 = 0`.
pub fn weighted_kl_value(p: &[f64], q: &[f64], w: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .zip(w)
        .map(|((&p, &q), &w)| if p > 0.0 { w * p * (p / q).ln() } else { 0.0 })
        .sum()
}

fn context_free(name: &str, d: LogDistribution) -> Arc<TabularProvider> {
    Arc::new(TabularProvider::new(name, d))
}

fn to_dist(p: &[f64]) -> Result<LogDistribution, HarnessError> {
    LogDistribution::from_probs(p).map_err(|e| HarnessError::InvalidSpec(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub instances: usize,
    /// Largest discrepancy observed (TV or relative error).
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleCheck {
    fn new(name: &str, instances: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            worst,
            tolerance,
            pass: worst <= tolerance,
        }
    }
}

/// Random weighted sums of 2–4 sources over 3–5 tokens: numerical
/// minimization of `Σ_i λ_i KL(P || Q_i)` against `kl_optimal` evaluation.
pub fn check_weighted_kl(instances: usize, seed: u64) -> Result<OracleCheck, HarnessError> {
    let mut rng = RngStream::new(seed, 10);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = 3 + (rng.next_u64() % 3) as usize;
        let k = 2 + (rng.next_u64() % 3) as usize;
        let qs: Vec<LogDistribution> = (0..k).map(|_| random_distribution(&mut rng, n, 2)).collect();
        let lambdas: Vec<f64> = (0..k).map(|_| 0.2 + 1.8 * rng.next_f64()).collect();
        let mut registry = Registry::new(n);
        let mut src = Vec::new();
        for (i, (q, l)) in qs.iter().zip(&lambdas).enumerate() {
            registry.add_provider(context_free(&format!("Q{i}"), q.clone()))?;
            src.push(format!("{l}*Q{i}"));
        }
        let f = parse_formula(&src.join(" + "), &registry)?.with_mode(Normalization::KlOptimal);
        let got = f.evaluate(&[])?;
        let q: Vec<Vec<f64>> = qs.iter().map(LogDistribution::probs).collect();
        let objective = |p: &[f64]| {
            q.iter()
                .zip(&lambdas)
                .map(|(q, &l)| weighted_kl_value(p, q, &vec![l; n]))
                .sum::<f64>()
        };
        let gradient = |p: &[f64]| {
            (0..n)
                .map(|x| {
                    q.iter()
                        .zip(&lambdas)
                        .map(|(q, &l)| l * (p[x].ln() + 1.0 - q[x].ln()))
                        .sum()
                })
                .collect()
        };
        let p = minimize_on_simplex(n, objective, gradient, 1e-10, 200_000);
        worst = worst.max(total_variation(&to_dist(&p)?, &got)?);
    }
    Ok(OracleCheck::new("weighted_kl_minimizer", instances, worst, 1e-4))
}

/// Unnormalized `union` / `intersection` masses against elementwise max and
/// min of the two sources, as relative error.
pub fn check_set_operator_masses(pairs: usize, seed: u64) -> Result<OracleCheck, HarnessError> {
    let mut rng = RngStream::new(seed, 11);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let n = 2 + (rng.next_u64() % 7) as usize;
        let q1 = random_distribution(&mut rng, n, 3);
        let q2 = random_distribution(&mut rng, n, 3);
        let r = Registry::new(n)
            .with_provider(context_free("Q1", q1.clone()))?
            .with_provider(context_free("Q2", q2.clone()))?;
        let (a, b) = (q1.probs(), q2.probs());
        for (op, pick) in [("union", f64::max as fn(f64, f64) -> f64), ("intersection", f64::min)] {
            let logits = parse_formula(&format!("{op}(Q1, Q2)"), &r)?.combined_logits(&[])?;
            for x in 0..n {
                let want = pick(a[x], b[x]);
                worst = worst.max((logits[x].exp() - want).abs() / want);
            }
        }
    }
    Ok(OracleCheck::new("set_operator_masses", pairs, worst, 1e-12))
}

/// Grid minimization of the indicator-weighted objective on 3-token
/// instances against the evaluated `union` and `intersection`.
pub fn check_set_operator_objective(instances: usize, seed: u64) -> Result<OracleCheck, HarnessError> {
    let mut rng = RngStream::new(seed, 12);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let q1 = random_distribution(&mut rng, 3, 2);
        let q2 = random_distribution(&mut rng, 3, 2);
        let r = Registry::new(3)
            .with_provider(context_free("Q1", q1.clone()))?
            .with_provider(context_free("Q2", q2.clone()))?;
        let (a, b) = (q1.probs(), q2.probs());
        for op in ["union", "intersection"] {
            // union weights Q1 where Q1 > Q2, intersection where Q1 <= Q2
            let w1: Vec<f64> = (0..3)
                .map(|x| f64::from(u8::from((a[x] > b[x]) == (op == "union"))))
                .collect();
            let w2: Vec<f64> = w1.iter().map(|w| 1.0 - w).collect();
            let objective = |p: &[f64]| weighted_kl_value(p, &a, &w1) + weighted_kl_value(p, &b, &w2);
            let p = grid_minimize_3(objective, 1e-6);
            let got = parse_formula(&format!("{op}(Q1, Q2)"), &r)?.evaluate(&[])?;
            worst = worst.max(total_variation(&to_dist(&p)?, &got)?);
        }
    }
    Ok(OracleCheck::new("set_operator_objective", instances, worst, 1e-3))
}

/// Direct minimization of `KL(P || M) + λ E_P[−log C(ctx ⊕ x)]` against
/// `M + λ*classifier(C, |T|)`.
pub fn check_classifier(fixtures: usize, seed: u64) -> Result<OracleCheck, HarnessError> {
    let mut rng = RngStream::new(seed, 13);
    let mut worst: f64 = 0.0;
    let ctx: [TokenId; 2] = [1, 0];
    for _ in 0..fixtures {
        let n = 3 + (rng.next_u64() % 4) as usize;
        let m = random_distribution(&mut rng, n, 2);
        let mut c = TabularClassifier::new("C", 0.05 + 0.9 * rng.next_f64()).with_key_len(ctx.len() + 1);
        let mut scores = Vec::with_capacity(n);
        for x in 0..n as TokenId {
            let s = 0.02 + 0.96 * rng.next_f64();
            c.insert(vec![ctx[0], ctx[1], x], s)?;
            scores.push(s);
        }
        let r = Registry::new(n)
            .with_provider(context_free("M", m.clone()))?
            .with_classifier(Arc::new(c))?;
        let mp = m.probs();
        for lambda in [0.5, 1.0, 2.0] {
            let f = parse_formula(&format!("M + {lambda}*classifier(C, {n})"), &r)?;
            let got = f.evaluate(&ctx)?;
            let objective = |p: &[f64]| {
                weighted_kl_value(p, &mp, &vec![1.0; n])
                    - lambda * p.iter().zip(&scores).map(|(p, s)| p * s.ln()).sum::<f64>()
            };
            let gradient = |p: &[f64]| {
                (0..n)
                    .map(|x| p[x].ln() + 1.0 - mp[x].ln() - lambda * scores[x].ln())
                    .collect()
            };
            let p = minimize_on_simplex(n, objective, gradient, 1e-10, 200_000);
            worst = worst.max(total_variation(&to_dist(&p)?, &got)?);
        }
    }
    Ok(OracleCheck::new("classifier_cross_entropy", fixtures * 3, worst, 1e-4))
}

/// Next-token distributions of a big and a small model under attributes
/// `a1` and `a2`, built from Bayes' rule `P(x | a) ∝ P(x) P(a | x)`.
#[derive(Debug, Clone)]
pub struct TransferFixture {
    pub big_a1: LogDistribution,
    pub big_a2: LogDistribution,
    pub small_a1: LogDistribution,
    pub small_a2: LogDistribution,
}

impl TransferFixture {
    /// When `consistent`, both models share the attribute likelihood ratio
    /// `P(a2 | x) / P(a1 | x)` up to a constant; otherwise the small model's
    /// ratio is redrawn.
    pub fn random(n: usize, seed: u64, consistent: bool) -> Self {
        let mut rng = RngStream::new(seed, 14);
        let big = random_distribution(&mut rng, n, 2).probs();
        let small = random_distribution(&mut rng, n, 1).probs();
        let like = |rng: &mut RngStream| -> Vec<f64> { (0..n).map(|_| 0.05 + 0.9 * rng.next_f64()).collect() };
        let big_l1 = like(&mut rng);
        let big_l2 = like(&mut rng);
        let small_l1 = like(&mut rng);
        let small_l2: Vec<f64> = if consistent {
            // Same ratio, rescaled so the likelihoods stay below one.
            let ratio: Vec<f64> = (0..n).map(|x| big_l2[x] / big_l1[x] * small_l1[x]).collect();
            let top = ratio.iter().copied().fold(0.0, f64::max);
            ratio.iter().map(|v| 0.9 * v / top).collect()
        } else {
            like(&mut rng)
        };
        let posterior = |prior: &[f64], l: &[f64]| {
            let p: Vec<f64> = prior.iter().zip(l).map(|(a, b)| a * b).collect();
            LogDistribution::from_probs(&p).expect("positive weights")
        };
        Self {
            big_a1: posterior(&big, &big_l1),
            big_a2: posterior(&big, &big_l2),
            small_a1: posterior(&small, &small_l1),
            small_a2: posterior(&small, &small_l2),
        }
    }

    /// Registry with `Ma1`, `Ma2`, `ma1` and `ma2`.
    pub fn registry(&self) -> Registry {
        let n = self.big_a1.len();
        Registry::new(n)
            .with_provider(context_free("Ma1", self.big_a1.clone()))
            .and_then(|r| r.with_provider(context_free("Ma2", self.big_a2.clone())))
            .and_then(|r| r.with_provider(context_free("ma1", self.small_a1.clone())))
            .and_then(|r| r.with_provider(context_free("ma2", self.small_a2.clone())))
            .expect("fixture registry is valid")
    }

    /// `Ma2` with the big model's `a2` call replaced by the small-model ratio.
    pub fn rewritten(&self) -> Result<Formula, HarnessError> {
        let e = attribute_transfer_rewrite(&parse_expr("Ma2")?, "Ma2", "Ma1", "ma1", "ma2");
        Ok(Formula::compile(&e, &self.registry())?)
    }
}

/// Largest absolute probability error of the rewritten formula on
/// consistent fixtures, and whether every inconsistent fixture shows a
/// positive TV.
pub fn check_attribute_transfer(fixtures: usize, seed: u64) -> Result<OracleCheck, HarnessError> {
    let mut worst: f64 = 0.0;
    for i in 0..fixtures {
        let n = 3 + i % 5;
        let good = TransferFixture::random(n, seed.wrapping_add(i as u64), true);
        let got = good.rewritten()?.evaluate(&[])?;
        for (a, b) in got.probs().iter().zip(good.big_a2.probs()) {
            worst = worst.max((a - b).abs());
        }
        let bad = TransferFixture::random(n, seed.wrapping_add(i as u64), false);
        let got = bad.rewritten()?.evaluate(&[])?;
        if total_variation(&got, &bad.big_a2)? <= 0.0 {
            worst = f64::INFINITY;
        }
    }
    Ok(OracleCheck::new("attribute_transfer", fixtures, worst, 1e-9))
}

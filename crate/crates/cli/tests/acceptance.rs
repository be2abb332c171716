//! Acceptance checks, one PASS/FAIL line each. Every oracle here is
//! computed independently of the library's own harness.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use model_arith::dist::{LogDistribution, RngStream, TokenId};
use model_arith::engine::{generate, GenerationConfig};
use model_arith::formula::{attribute_transfer_rewrite, parse_expr, parse_formula, Formula, Normalization, Registry};
use model_arith::harness::fixtures::{
    bundled_registry, difficulty_registry, exactness_fixtures, perturbed, random_tabular, FIXTURE_PROMPT,
};
use model_arith::harness::{run_sweep, Metric, PromptSpec, Speculation, SweepSpec};
use model_arith::providers::{TabularClassifier, TabularProvider};
use model_arith::speculative::{
    speculative_generate, speculative_step, tune_factors, AcceptanceEstimate, CalibrationConfig, CostModel,
    TuningReport, UnitCost,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// splitmix64, kept separate from the library's generator.
struct Mix(u64);

impl Mix {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    fn probs(&mut self, n: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| 0.01 + self.uniform().powi(2)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn context_free(name: &str, p: &[f64]) -> Arc<TabularProvider> {
    Arc::new(TabularProvider::new(name, LogDistribution::from_probs(p).unwrap()))
}

/// Euclidean projection onto `{p : Σp = 1, p ≥ lo}`.
fn project(v: &[f64], lo: f64) -> Vec<f64> {
    let n = v.len();
    let mass = 1.0 - lo * n as f64;
    let shifted: Vec<f64> = v.iter().map(|x| x - lo).collect();
    let mut u = shifted.clone();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - mass) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    shifted.iter().map(|x| (x - theta).max(0.0) + lo).collect()
}

/// Projected gradient descent with a backtracking step.
fn pgd(n: usize, obj: impl Fn(&[f64]) -> f64, grad: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut p = vec![1.0 / n as f64; n];
    let mut step: f64 = 1.0;
    for _ in 0..200_000 {
        let g = grad(&p);
        let f0 = obj(&p);
        let mut moved = false;
        for _ in 0..60 {
            let q = project(&p.iter().zip(&g).map(|(a, b)| a - step * b).collect::<Vec<_>>(), 1e-14);
            let d: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
            let lin: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let sq: f64 = d.iter().map(|x| x * x).sum();
            let fq = obj(&q);
            if fq <= f0 + lin + sq / (2.0 * step) + 1e-15 {
                // Stop once the gradient mapping vanishes or progress stalls.
                let mapping = d.iter().fold(0.0f64, |m, x| m.max(x.abs())) / step;
                moved = mapping > 1e-11 && fq < f0;
                p = q;
                step = (step * 2.0).min(1e3);
                break;
            }
            step /= 2.0;
        }
        if !moved {
            break;
        }
    }
    p
}

/// Minimizes over the 3-simplex with a grid refined around the best point.
fn grid3(obj: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut best = vec![1.0 / 3.0; 3];
    let mut best_v = obj(&best);
    let mut center = (0.0, 0.0);
    let mut half = 0.5;
    let mut h = 1.0 / 400.0;
    let mut first = true;
    while h > 1e-7 {
        let (lo0, hi0, lo1, hi1): (f64, f64, f64, f64) = if first {
            (0.0, 1.0, 0.0, 1.0)
        } else {
            (center.0 - half, center.0 + half, center.1 - half, center.1 + half)
        };
        let mut a = lo0.max(0.0);
        while a <= hi0.min(1.0) {
            let mut b = lo1.max(0.0);
            while b <= hi1.min(1.0 - a) {
                let p = [a.max(1e-15), b.max(1e-15), (1.0 - a - b).max(1e-15)];
                let v = obj(&p);
                if v < best_v {
                    best_v = v;
                    best = p.to_vec();
                }
                b += h;
            }
            a += h;
        }
        center = (best[0], best[1]);
        half = 10.0 * h;
        h /= 20.0;
        first = false;
    }
    let s: f64 = best.iter().sum();
    best.iter().map(|v| v / s).collect()
}

fn kl_terms(p: &[f64], q: &[f64], w: &[f64]) -> f64 {
    p.iter().zip(q).zip(w).map(|((p, q), w)| w * p * (p / q).ln()).sum()
}

type Outcome = Result<String, String>;

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn criterion_kl_optimum() -> Outcome {
    let mut rng = Mix(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 3 + rng.below(3);
        let k = 2 + rng.below(3);
        let qs: Vec<Vec<f64>> = (0..k).map(|_| rng.probs(n)).collect();
        let lambdas: Vec<f64> = (0..k).map(|_| 0.1 + 2.9 * rng.uniform()).collect();
        let mut r = Registry::new(n);
        let mut src = Vec::new();
        for (i, (q, l)) in qs.iter().zip(&lambdas).enumerate() {
            r.add_provider(context_free(&format!("Q{i}"), q)).unwrap();
            src.push(format!("{l}*Q{i}"));
        }
        let f = parse_formula(&src.join(" + "), &r).unwrap().with_mode(Normalization::KlOptimal);
        let got = f.evaluate(&[]).unwrap().probs();
        let obj = |p: &[f64]| qs.iter().zip(&lambdas).map(|(q, l)| l * kl_terms(p, q, &vec![1.0; n])).sum();
        let grad = |p: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|x| qs.iter().zip(&lambdas).map(|(q, l)| l * (p[x].ln() + 1.0 - q[x].ln())).sum())
                .collect()
        };
        worst = worst.max(tv(&pgd(n, obj, grad), &got));
    }
    if worst <= 1e-4 {
        Ok(format!("100 instances, worst TV {worst:.2e}"))
    } else {
        Err(format!("worst TV {worst:.2e} exceeds 1e-4"))
    }
}

fn criterion_set_operators() -> Outcome {
    let mut rng = Mix(2);
    let mut worst_mass: f64 = 0.0;
    for _ in 0..1000 {
        let n = 2 + rng.below(7);
        let (a, b) = (rng.probs(n), rng.probs(n));
        let r = Registry::new(n)
            .with_provider(context_free("Q1", &a))
            .and_then(|r| r.with_provider(context_free("Q2", &b)))
            .unwrap();
        for op in ["union", "intersection"] {
            let logits = parse_formula(&format!("{op}(Q1, Q2)"), &r).unwrap().combined_logits(&[]).unwrap();
            for x in 0..n {
                let want = if op == "union" { a[x].max(b[x]) } else { a[x].min(b[x]) };
                worst_mass = worst_mass.max((logits[x].exp() - want).abs() / want);
            }
        }
    }
    let mut worst_tv: f64 = 0.0;
    for _ in 0..20 {
        let (a, b) = (rng.probs(3), rng.probs(3));
        let r = Registry::new(3)
            .with_provider(context_free("Q1", &a))
            .and_then(|r| r.with_provider(context_free("Q2", &b)))
            .unwrap();
        for op in ["union", "intersection"] {
            // union puts weight on Q1 where Q1 is larger, intersection where it is not
            let on_first: Vec<f64> = (0..3)
                .map(|x| if (a[x] > b[x]) == (op == "union") { 1.0 } else { 0.0 })
                .collect();
            let on_second: Vec<f64> = on_first.iter().map(|w| 1.0 - w).collect();
            let p = grid3(|p| kl_terms(p, &a, &on_first) + kl_terms(p, &b, &on_second));
            let got = parse_formula(&format!("{op}(Q1, Q2)"), &r).unwrap().evaluate(&[]).unwrap().probs();
            worst_tv = worst_tv.max(tv(&p, &got));
        }
    }
    if worst_mass <= 1e-12 && worst_tv <= 1e-3 {
        Ok(format!("mass error {worst_mass:.2e}, grid TV {worst_tv:.2e}"))
    } else {
        Err(format!("mass error {worst_mass:.2e} (limit 1e-12), grid TV {worst_tv:.2e} (limit 1e-3)"))
    }
}

fn criterion_classifier() -> Outcome {
    let mut rng = Mix(3);
    let ctx: [TokenId; 2] = [2, 1];
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = 3 + rng.below(4);
        let m = rng.probs(n);
        let scores: Vec<f64> = (0..n).map(|_| 0.02 + 0.96 * rng.uniform()).collect();
        let mut c = TabularClassifier::new("C", 0.5).with_key_len(3);
        for (x, &s) in scores.iter().enumerate() {
            c.insert(vec![ctx[0], ctx[1], x as TokenId], s).unwrap();
        }
        let r = Registry::new(n)
            .with_provider(context_free("M", &m))
            .and_then(|r| r.with_classifier(Arc::new(c)))
            .unwrap();
        for lambda in [0.5, 1.0, 2.0] {
            let f = parse_formula(&format!("M + {lambda}*classifier(C, {n})"), &r).unwrap();
            let got = f.evaluate(&ctx).unwrap().probs();
            let obj = |p: &[f64]| {
                kl_terms(p, &m, &vec![1.0; n]) - lambda * p.iter().zip(&scores).map(|(p, s)| p * s.ln()).sum::<f64>()
            };
            let grad =
                |p: &[f64]| -> Vec<f64> { (0..n).map(|x| p[x].ln() + 1.0 - m[x].ln() - lambda * scores[x].ln()).collect() };
            worst = worst.max(tv(&pgd(n, obj, grad), &got));
        }
    }
    if worst <= 1e-4 {
        Ok(format!("60 cases, worst TV {worst:.2e}"))
    } else {
        Err(format!("worst TV {worst:.2e} exceeds 1e-4"))
    }
}

/// Runs `f(i)` for `i in 0..n` across threads and merges the counts.
fn count_parallel(n: usize, f: impl Fn(usize) -> Vec<TokenId> + Sync) -> HashMap<Vec<TokenId>, usize> {
    let threads = std::thread::available_parallelism().map_or(1, |t| t.get());
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || {
                    let mut counts = HashMap::new();
                    for i in t * chunk..((t + 1) * chunk).min(n) {
                        *counts.entry(f(i)).or_insert(0) += 1;
                    }
                    counts
                })
            })
            .collect();
        let mut all = HashMap::new();
        for h in handles {
            for (k, v) in h.join().unwrap() {
                *all.entry(k).or_insert(0) += v;
            }
        }
        all
    })
}

/// Pearson statistic with cells of expected count below 5 pooled together.
fn chi_square_p(observed: &[usize], expected_probs: &[f64], total: usize) -> f64 {
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    for (o, p) in observed.iter().zip(expected_probs) {
        let e = p * total as f64;
        if e < 5.0 {
            pooled.0 += *o as f64;
            pooled.1 += e;
        } else {
            cells.push((*o as f64, e));
        }
    }
    if pooled.1 > 0.0 {
        if pooled.1 >= 5.0 || cells.is_empty() {
            cells.push(pooled);
        } else {
            let smallest = (0..cells.len())
                .min_by(|&a, &b| cells[a].1.partial_cmp(&cells[b].1).unwrap())
                .unwrap();
            cells[smallest].0 += pooled.0;
            cells[smallest].1 += pooled.1;
        }
    }
    if cells.len() < 2 {
        return 1.0;
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    ChiSquared::new((cells.len() - 1) as f64).unwrap().sf(stat)
}

fn criterion_speculative_exactness() -> Outcome {
    let r = bundled_registry();
    let fixtures = exactness_fixtures();
    let threshold = 0.001 / fixtures.len() as f64;
    let mut failures = Vec::new();
    let mut min_p: f64 = 1.0;
    let mut max_tv: f64 = 0.0;
    for fx in &fixtures {
        let (f, factors) = fx.compile(&r);
        let horizon = factors.as_slice().iter().copied().max().unwrap_or(1).max(3);
        let spec = |seed: u64| {
            speculative_generate(&f, &FIXTURE_PROMPT, &factors, &GenerationConfig::new(horizon).with_seed(seed))
                .unwrap()
                .result
                .tokens
        };
        let want = f.evaluate(&FIXTURE_PROMPT).unwrap().probs();
        let n = 100_000;
        let firsts = count_parallel(n, |i| spec(i as u64)[..1].to_vec());
        let observed: Vec<usize> = (0..want.len() as TokenId).map(|x| firsts.get(&vec![x]).copied().unwrap_or(0)).collect();
        let p = chi_square_p(&observed, &want, n);
        min_p = min_p.min(p);

        let joint_n = 200_000;
        let offset = 1u64 << 40;
        let a = count_parallel(joint_n, |i| spec(offset + i as u64)[..3].to_vec());
        let b = count_parallel(joint_n, |i| {
            generate(&f, &FIXTURE_PROMPT, &GenerationConfig::new(3).with_seed(2 * offset + i as u64))
                .unwrap()
                .tokens
        });
        let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).cloned().collect();
        let d = 0.5
            * keys
                .iter()
                .map(|k| {
                    (a.get(k).copied().unwrap_or(0) as f64 - b.get(k).copied().unwrap_or(0) as f64).abs() / joint_n as f64
                })
                .sum::<f64>();
        max_tv = max_tv.max(d);
        if p <= threshold || d > 0.01 {
            failures.push(format!("{} (p {p:.2e}, joint TV {d:.4})", fx.name));
        }
    }
    if failures.is_empty() {
        Ok(format!("10 formulas, min p {min_p:.3e} > {threshold:.0e}, max joint TV {max_tv:.4}"))
    } else {
        Err(failures.join("; "))
    }
}

fn sample(p: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (x, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return x as TokenId;
        }
    }
    (p.len() - 1) as TokenId
}

fn criterion_acceptance_rate() -> Outcome {
    let mut rng = Mix(5);
    let mut worst: f64 = 0.0;
    for pair in 0..20 {
        let n = 2 + rng.below(7);
        let (g, v) = (rng.probs(n), rng.probs(n));
        let (gd, vd) = (LogDistribution::from_probs(&g).unwrap(), LogDistribution::from_probs(&v).unwrap());
        let trials = 100_000;
        let mut accepted = 0;
        let mut step_rng = RngStream::new(pair, 77);
        for _ in 0..trials {
            let x = sample(&g, rng.uniform());
            if speculative_step(&gd, &vd, x, &mut step_rng).unwrap().is_accepted() {
                accepted += 1;
            }
        }
        worst = worst.max((accepted as f64 / trials as f64 - (1.0 - tv(&g, &v))).abs());
    }
    if worst <= 0.01 {
        Ok(format!("20 pairs, worst deviation {worst:.4}"))
    } else {
        Err(format!("deviation {worst:.4} exceeds 0.01"))
    }
}

/// Cost per token written as `(1 − a)(C2 + s·C1) / (1 − a^s)`.
fn brute_force_factor(a: f64, c1: f64, c2: f64, s_max: usize) -> usize {
    let cost = |s: usize| {
        if a >= 1.0 {
            (c2 + s as f64 * c1) / s as f64
        } else {
            (1.0 - a) * (c2 + s as f64 * c1) / (1.0 - a.powi(s as i32))
        }
    };
    let mut best = (1, cost(1));
    for s in 2..=s_max {
        if cost(s) < best.1 {
            best = (s, cost(s));
        }
    }
    best.0
}

fn tuned(a: f64, c1: f64, c2: f64, s_max: usize) -> usize {
    let estimates = [AcceptanceEstimate { label: "T".into(), acceptance: a, positions: 1 }];
    let costs = CostModel {
        units: vec![UnitCost { name: "T".into(), cost: c2, proposal_cost: c1, pinned: false }],
    };
    tune_factors(&estimates, &costs, s_max).unwrap().factors[0]
}

fn criterion_tuner() -> Outcome {
    let mut rng = Mix(6);
    let mut cases = vec![(0.5, 1.0, 10.0)];
    while cases.len() < 200 {
        let a = rng.uniform();
        let c1 = 10f64.powf(-2.0 + 3.0 * rng.uniform());
        let c2 = 10f64.powf(-1.0 + 3.0 * rng.uniform());
        cases.push((a, c1, c2));
    }
    let mismatches: Vec<String> = cases
        .iter()
        .filter_map(|&(a, c1, c2)| {
            let (got, want) = (tuned(a, c1, c2, 64), brute_force_factor(a, c1, c2, 64));
            (got != want).then(|| format!("a={a:.4} C1={c1:.4} C2={c2:.4}: {got} vs {want}"))
        })
        .collect();
    let worked = tuned(0.5, 1.0, 10.0, 64);
    if mismatches.is_empty() && worked == 3 {
        Ok("200 triples agree, a=0.5 C1=1 C2=10 gives s=3".into())
    } else {
        Err(format!("worked case gives {worked}; {}", mismatches.join("; ")))
    }
}

fn criterion_calls_per_token() -> Outcome {
    let r = bundled_registry();
    let mut exact = Vec::new();
    for (src, k) in [("M + 0.5*B", 2.0), ("M + 0.5*B - 0.3*N + 0.2*A", 4.0)] {
        let f = parse_formula(src, &r).unwrap();
        let cpt = generate(&f, &FIXTURE_PROMPT, &GenerationConfig::new(64).with_seed(1)).unwrap().calls_per_token();
        if cpt != k {
            return Err(format!("{src} reports {cpt} calls per token, expected {k}"));
        }
        exact.push(cpt);
    }
    let n = 6;
    let m = random_tabular("M", n, 1, 31, 2);
    let near = perturbed("Ma", &m, 0.05, 32);
    let low_tv = Registry::new(n)
        .with_provider(Arc::new(m))
        .and_then(|r| r.with_provider(Arc::new(near)))
        .unwrap();
    let f = parse_formula("M + Ma", &low_tv).unwrap();
    let prompts: Vec<Vec<TokenId>> = (0..n as TokenId).map(|x| vec![x]).collect();
    let cal = CalibrationConfig::new(prompts.clone(), 20, 32).with_seed(3);
    let (_, factors, _) = TuningReport::tune(&f, &cal, 64).unwrap();
    let (mut calls, mut tokens) = (0u64, 0usize);
    for (i, p) in prompts.iter().enumerate() {
        let run = speculative_generate(&f, p, &factors, &GenerationConfig::new(200).with_seed(100 + i as u64)).unwrap();
        calls += run.result.total_calls();
        tokens += run.result.tokens.len();
    }
    let cpt = calls as f64 / tokens as f64;
    if cpt < 2.0 {
        Ok(format!("plain {exact:?}, tuned factors {:?} give {cpt:.3} < 2", factors.as_slice()))
    } else {
        Err(format!("tuned factors {:?} give {cpt:.3} calls per token", factors.as_slice()))
    }
}

fn criterion_strength_trend() -> Outcome {
    let prompts: Vec<PromptSpec> = (0..8).map(|x| PromptSpec::Tokens(vec![x])).collect();
    let mut spec = SweepSpec::new("M + {l}*Ma", prompts)
        .with_slot("l", vec![0.1, 0.5, 1.0])
        .with_metrics([Metric::CallsPerToken]);
    spec.speculation = Speculation::Tuned;
    spec.samples_per_prompt = 25;
    spec.max_tokens = 64;
    spec.calibration_samples = 40;
    spec.seed = 8;
    let report = run_sweep(&spec, &difficulty_registry(), &model_arith::dist::Tokenizer::Bytes).unwrap();
    let values: Vec<f64> = report.column(Metric::CallsPerToken).iter().map(|r| r.value).collect();
    let text: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    if values.len() == 3 && values.windows(2).all(|w| w[0] <= w[1]) {
        Ok(format!("calls per token {}", text.join(" <= ")))
    } else {
        Err(format!("calls per token {} are not non-decreasing", text.join(", ")))
    }
}

/// Bayes posteriors `P(x | a) ∝ P(x) P(a | x)`; when `consistent` the small
/// model's likelihood ratio matches the big model's up to a constant.
fn transfer_case(rng: &mut Mix, n: usize, consistent: bool) -> (Registry, Vec<f64>) {
    let big = rng.probs(n);
    let small = rng.probs(n);
    let mut like = || -> Vec<f64> { (0..n).map(|_| 0.1 + 0.8 * rng.uniform()).collect() };
    let (big1, big2, small1) = (like(), like(), like());
    let small2: Vec<f64> = if consistent {
        (0..n).map(|x| 0.3 * small1[x] * big2[x] / big1[x]).collect()
    } else {
        like()
    };
    let post = |prior: &[f64], l: &[f64]| -> Vec<f64> {
        let w: Vec<f64> = prior.iter().zip(l).map(|(a, b)| a * b).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    };
    let truth = post(&big, &big2);
    let r = Registry::new(n)
        .with_provider(context_free("Ma1", &post(&big, &big1)))
        .and_then(|r| r.with_provider(context_free("Ma2", &truth)))
        .and_then(|r| r.with_provider(context_free("ma1", &post(&small, &small1))))
        .and_then(|r| r.with_provider(context_free("ma2", &post(&small, &small2))))
        .unwrap();
    (r, truth)
}

fn rewritten(r: &Registry) -> Formula {
    let e = attribute_transfer_rewrite(&parse_expr("Ma2").unwrap(), "Ma2", "Ma1", "ma1", "ma2");
    Formula::compile(&e, r).unwrap()
}

fn criterion_attribute_transfer() -> Outcome {
    let mut rng = Mix(9);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let (r, truth) = transfer_case(&mut rng, 3 + i % 6, true);
        let got = rewritten(&r).evaluate(&[]).unwrap().probs();
        for (a, b) in got.iter().zip(&truth) {
            worst = worst.max((a - b).abs());
        }
    }
    let (r, truth) = transfer_case(&mut rng, 5, false);
    let violated = tv(&rewritten(&r).evaluate(&[]).unwrap().probs(), &truth);
    if worst <= 1e-9 && violated > 0.0 {
        Ok(format!("20 fixtures, worst error {worst:.2e}; violating fixture TV {violated:.3}"))
    } else {
        Err(format!("worst error {worst:.2e}, violating fixture TV {violated:.3e}"))
    }
}

fn criterion_determinism() -> Outcome {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy.json");
    let run = |extra: &[&str]| -> Result<Vec<u8>, String> {
        let o = Command::new(env!("CARGO_BIN_EXE_model-arith"))
            .arg("--config")
            .arg(&config)
            .args(["generate", "--formula", "M - 0.6*Mtox + 0.5*union(M, Mtox)", "--prompt", "the cat"])
            .args(["--max-tokens", "24", "--seed", "42", "--json"])
            .args(extra)
            .env_remove("MODEL_ARITH_CONFIG")
            .output()
            .map_err(|e| e.to_string())?;
        if o.status.success() {
            Ok(o.stdout)
        } else {
            Err(String::from_utf8_lossy(&o.stderr).into_owned())
        }
    };
    let a = run(&[])?;
    let b = run(&[])?;
    let c = run(&["--speculative", "--factors", "ones"])?;
    let parsed: serde_json::Value = serde_json::from_slice(&a).map_err(|e| e.to_string())?;
    if a == b && a == c && parsed["tokens"].as_array().is_some_and(|t| t.len() == 24) {
        Ok(format!("{} identical bytes across three runs", a.len()))
    } else {
        Err("outputs differ".into())
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 kl_optimal minimizer", criterion_kl_optimum, Duration::from_secs(30)),
        ("2 union and intersection", criterion_set_operators, Duration::from_secs(20)),
        ("3 classifier term", criterion_classifier, Duration::from_secs(10)),
        ("4 speculative exactness", criterion_speculative_exactness, Duration::from_secs(300)),
        ("5 acceptance rate", criterion_acceptance_rate, Duration::from_secs(60)),
        ("6 factor tuner", criterion_tuner, Duration::from_secs(5)),
        ("7 calls per token", criterion_calls_per_token, Duration::from_secs(60)),
        ("8 strength trend", criterion_strength_trend, Duration::from_secs(120)),
        ("9 attribute transfer", criterion_attribute_transfer, Duration::from_secs(5)),
        ("10 determinism", criterion_determinism, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > limit => Err(format!("{msg}, but took {elapsed:.1?} (limit {limit:?})")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS {name}: {msg} [{elapsed:.1?}]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} [{elapsed:.1?}]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

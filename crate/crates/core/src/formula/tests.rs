use std::sync::Arc;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::dist::{total_variation, LogDistribution};
use crate::providers::{FnClassifier, TabularClassifier, TabularProvider};

fn constant(name: &str, probs: &[f64]) -> Arc<TabularProvider> {
    Arc::new(TabularProvider::new(
        name,
        LogDistribution::from_probs(probs).unwrap(),
    ))
}

fn registry(sources: &[(&str, &[f64])]) -> Registry {
    let mut r = Registry::new(sources[0].1.len());
    for (name, p) in sources {
        r.add_provider(constant(name, p)).unwrap();
    }
    r
}

fn eval(text: &str, r: &Registry, mode: Normalization) -> LogDistribution {
    parse_formula(text, r)
        .unwrap()
        .with_mode(mode)
        .evaluate(&[])
        .unwrap()
}

fn assert_probs(d: &LogDistribution, expected: &[f64], eps: f64) {
    for (x, &e) in expected.iter().enumerate() {
        assert_abs_diff_eq!(d.prob(x as u32), e, epsilon = eps);
    }
}

#[test]
fn single_term_is_the_source() {
    let r = registry(&[("Q1", &[0.2, 0.3, 0.5])]);
    for mode in [Normalization::Raw, Normalization::KlOptimal] {
        assert_probs(&eval("Q1", &r, mode), &[0.2, 0.3, 0.5], 1e-12);
    }
}

#[test]
fn kl_optimal_sum_is_geometric_mean() {
    let r = registry(&[("Q1", &[0.9, 0.1]), ("Q2", &[0.5, 0.5])]);
    let p = eval("Q1 + Q2", &r, Normalization::KlOptimal);
    // grid search over the 2-simplex for argmin KL(P||Q1) + KL(P||Q2)
    let objective = |a: f64| {
        let p = [a, 1.0 - a];
        let q1 = [0.9, 0.1];
        let q2 = [0.5, 0.5];
        (0..2)
            .map(|i| p[i] * ((p[i] / q1[i]).ln() + (p[i] / q2[i]).ln()))
            .sum::<f64>()
    };
    let best = (1..100_000)
        .map(|i| i as f64 / 100_000.0)
        .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
        .unwrap();
    assert_abs_diff_eq!(p.prob(0), best, epsilon = 1e-4);
    assert_probs(&p, &[0.75, 0.25], 1e-12);
}

#[test]
fn union_is_normalized_max() {
    let r = registry(&[("Q1", &[0.6, 0.3, 0.1]), ("Q2", &[0.1, 0.2, 0.7])]);
    let p = eval("union(Q1, Q2)", &r, Normalization::Raw);
    // max = (0.6, 0.3, 0.7), total 1.6
    assert_probs(&p, &[0.375, 0.1875, 0.4375], 1e-12);
    let i = eval("intersection(Q1, Q2)", &r, Normalization::Raw);
    // min = (0.1, 0.2, 0.1), total 0.4
    assert_probs(&i, &[0.25, 0.5, 0.25], 1e-12);
}

#[test]
fn union_of_equal_halves_is_uniform() {
    let r = registry(&[("Q1", &[0.8, 0.2]), ("Q2", &[0.2, 0.8])]);
    assert_probs(&eval("union(Q1, Q2)", &r, Normalization::Raw), &[0.5, 0.5], 1e-12);
}

#[test]
fn indicator_ties_go_to_second_half() {
    let r = registry(&[("Q1", &[0.5, 0.5]), ("Q2", &[0.5, 0.5])]);
    let f = parse_formula("union(Q1, Q2)", &r).unwrap();
    let [a, b] = f.units()[0].terms.as_slice() else {
        panic!()
    };
    let mut cache = SourceCache::new();
    f.fetch(&f.all_keys(), &[], &[0], &mut cache, &mut CallCounts::new())
        .unwrap();
    let dists = cache.slot(0).unwrap();
    assert_eq!(f.term_weight_for_test(a, dists), vec![0.0, 0.0]);
    assert_eq!(f.term_weight_for_test(b, dists), vec![1.0, 1.0]);
}

#[test]
fn rebalancing_makes_weight_sum_lambda_one() {
    let r = registry(&[
        ("Q1", &[0.5, 0.3, 0.2]),
        ("Q2", &[0.1, 0.6, 0.3]),
        ("Q3", &[0.4, 0.1, 0.5]),
    ]);
    let f = parse_formula("Q1 + 2*union(Q2, Q3)", &r).unwrap();
    let g = f.rebalanced().unwrap();
    let mut cache = SourceCache::new();
    f.fetch(&f.all_keys(), &[], &[0], &mut cache, &mut CallCounts::new())
        .unwrap();
    let dists = cache.slot(0).unwrap();
    assert_eq!(f.token_weight_sums(&[], dists).unwrap(), vec![3.0; 3]);
    assert_eq!(g.token_weight_sums(&[], dists).unwrap(), vec![1.0; 3]);
    assert_eq!(g.weight_sum(&[]), 1.0);
    // weights after: Q1 gets 1 - 2 = -1, the larger of Q2/Q3 gets 2
    let expected: Vec<f64> = (0..3)
        .map(|x| {
            let (q1, q2, q3) = ([0.5, 0.3, 0.2][x], [0.1, 0.6, 0.3][x], [0.4, 0.1, 0.5][x]);
            (-f64::ln(q1) + 2.0 * f64::max(q2, q3).ln()).exp()
        })
        .collect();
    let z: f64 = expected.iter().sum();
    let p = g.with_mode(Normalization::KlOptimal).evaluate(&[]).unwrap();
    for x in 0..3 {
        assert_abs_diff_eq!(p.prob(x as u32), expected[x] / z, epsilon = 1e-12);
    }
}

#[test]
fn rebalancing_single_term_changes_nothing() {
    let r = registry(&[("Q1", &[0.5, 0.3, 0.2])]);
    let f = parse_formula("2*Q1", &r).unwrap();
    let g = f.rebalanced().unwrap();
    assert_eq!(g.weight_sum(&[]), 2.0);
    assert_eq!(g.evaluate(&[]).unwrap(), f.evaluate(&[]).unwrap());
}

#[test]
fn rebalancing_needs_a_plain_first_term() {
    let r = registry(&[("Q1", &[0.5, 0.5]), ("Q2", &[0.2, 0.8])]);
    let f = parse_formula("union(Q1, Q2) + Q1", &r).unwrap();
    assert!(matches!(
        f.rebalanced(),
        Err(FormulaError::RebalanceUnsupported(_))
    ));
}

#[test]
fn kl_optimal_rejects_non_positive_weight_sum() {
    let r = registry(&[("M", &[0.5, 0.5]), ("Mtox", &[0.2, 0.8])]);
    for text in ["M - Mtox", "M - 2*Mtox"] {
        let f = parse_formula(text, &r)
            .unwrap()
            .with_mode(Normalization::KlOptimal);
        let err = f.evaluate(&[]).unwrap_err();
        assert!(matches!(err, FormulaError::NormalizationViolation(_)), "{text}");
        assert!(err.to_string().contains("constant, positive weight sum"));
    }
    // the raw mode has no such precondition
    assert!(parse_formula("M - Mtox", &r).unwrap().evaluate(&[]).is_ok());
}

#[test]
fn call_counts_deduplicate_sources() {
    let r = registry(&[
        ("M", &[0.5, 0.5]),
        ("Mtox", &[0.2, 0.8]),
        ("Mf", &[0.3, 0.7]),
        ("Mh", &[0.6, 0.4]),
        ("Ms", &[0.1, 0.9]),
    ]);
    let counts = |t: &str| count_provider_calls(&parse_formula(t, &r).unwrap());
    assert_eq!(counts("M"), CallCounts::from([("M".to_string(), 1)]));
    assert_eq!(
        counts("M - 0.96*union(Mtox, M)"),
        CallCounts::from([("M".to_string(), 1), ("Mtox".to_string(), 1)])
    );
    assert_eq!(counts("M + 0.5*Mf + 0.5*Mh + 0.5*Ms").values().sum::<u64>(), 4);
    assert_eq!(counts("supersede(Mf, M)"), CallCounts::from([("M".to_string(), 1)]));
    assert_eq!(counts("uniform").len(), 0);
}

#[test]
fn evaluation_counts_one_call_per_distinct_source() {
    let r = registry(&[("M", &[0.5, 0.5]), ("Mtox", &[0.2, 0.8])]);
    let f = parse_formula("M - 0.96*union(Mtox, M) + 0.1*M", &r).unwrap();
    let mut calls = CallCounts::new();
    f.evaluate_with(&[0, 1], &mut SourceCache::new(), &mut calls)
        .unwrap();
    assert_eq!(calls, count_provider_calls(&f));
}

#[test]
fn names_and_compositions_are_checked() {
    let r = registry(&[("M", &[0.5, 0.5]), ("N", &[0.2, 0.8])])
        .with_classifier(Arc::new(TabularClassifier::new("C", 0.5)))
        .unwrap();
    let err = parse_formula("M + 2*Mx", &r).unwrap_err();
    let FormulaError::Name { name, span } = &err else {
        panic!("{err:?}")
    };
    assert_eq!(name, "Mx");
    assert_eq!((span.start, span.end, span.line, span.col), (6, 8, 1, 7));
    for bad in [
        "union(M, classifier(C))",
        "intersection(classifier(C), M)",
        "union(M, 2*N)",
        "union(M, M + N)",
        "union(union(M, N), M)",
        "supersede(M, supersede(N, M))",
        "M + C",
        "classifier(M)",
    ] {
        assert!(
            matches!(
                parse_formula(bad, &r),
                Err(FormulaError::UnsupportedComposition { .. })
            ),
            "{bad}"
        );
    }
    assert!(parse_formula("union((M), uniform)", &r).is_ok());
}

#[test]
fn supersede_evaluates_as_its_authoritative_side() {
    let r = registry(&[("A", &[0.9, 0.1]), ("M", &[0.3, 0.7])]);
    let f = parse_formula("supersede(A, M)", &r).unwrap();
    assert_probs(&f.evaluate(&[]).unwrap(), &[0.3, 0.7], 1e-12);
    assert_eq!(f.units()[0].kind, UnitKind::Supersede);
    let names: Vec<&str> = f.proposal_keys(0).into_iter().map(|k| f.key_name(k)).collect();
    assert_eq!(names, ["A"]);
    let names: Vec<&str> = f.unit_keys(0).into_iter().map(|k| f.key_name(k)).collect();
    assert_eq!(names, ["M"]);
}

#[test]
fn classifier_term_multiplies_by_scores() {
    let r = registry(&[("M", &[0.5, 0.3, 0.2])])
        .with_classifier(Arc::new(
            TabularClassifier::new("C", 0.5)
                .with_entry(vec![0], 0.9)
                .unwrap()
                .with_entry(vec![1], 0.1)
                .unwrap()
                .with_entry(vec![2], 0.4)
                .unwrap(),
        ))
        .unwrap();
    for lambda in [0.5, 1.0, 2.0] {
        let p = eval(&format!("M + {lambda}*classifier(C)"), &r, Normalization::Raw);
        let un: Vec<f64> = [(0.5, 0.9), (0.3, 0.1), (0.2, 0.4)]
            .iter()
            .map(|(m, c): &(f64, f64)| m * c.powf(lambda))
            .collect();
        let z: f64 = un.iter().sum();
        for (x, u) in un.iter().enumerate() {
            assert_abs_diff_eq!(p.prob(x as u32), u / z, epsilon = 1e-12);
        }
    }
    // a top-k of 1 scores token 0 exactly and the rest at the prefix score 0.5
    let p = eval("M + classifier(C, 1)", &r, Normalization::Raw);
    let un = [0.5 * 0.9, 0.3 * 0.5, 0.2 * 0.5];
    let z: f64 = un.iter().sum();
    assert_probs(&p, &[un[0] / z, un[1] / z, un[2] / z], 1e-12);
}

#[test]
fn classifier_calls_are_counted_by_name() {
    let r = registry(&[("M", &[0.5, 0.5])])
        .with_classifier(Arc::new(FnClassifier::new("C", |_| 0.5)))
        .unwrap();
    let f = parse_formula("M + classifier(C)", &r).unwrap();
    let counts = count_provider_calls(&f);
    assert_eq!(counts.get("C"), Some(&1));
    assert_eq!(counts.get("M"), Some(&1));
}

#[test]
fn floored_tokens_stay_impossible_under_positive_weights() {
    let r = registry(&[("M", &[0.5, 0.5, 0.0]), ("N", &[0.2, 0.3, 0.5])]);
    let p = eval("M + N", &r, Normalization::Raw);
    assert_eq!(p.prob(2), 0.0);
    // a negative weight on a floored source is capped at the logit ceiling
    let f = parse_formula("N - M", &r).unwrap();
    let logits = f.combined_logits(&[]).unwrap();
    assert_eq!(logits[2], MAX_LOGIT);
}

#[test]
fn context_scale_hook_multiplies_lambda() {
    let r = registry(&[("M", &[0.5, 0.5]), ("N", &[0.2, 0.8])]);
    let scaled = parse_formula("M + N", &r)
        .unwrap()
        .with_context_scale(1, |ctx| ctx.len() as f64)
        .unwrap();
    let direct = parse_formula("M + 3*N", &r).unwrap();
    assert_eq!(
        scaled.evaluate(&[0, 0, 0]).unwrap(),
        direct.evaluate(&[0, 0, 0]).unwrap()
    );
    assert!(parse_formula("M", &r)
        .unwrap()
        .with_context_scale(3, |_| 1.0)
        .is_err());
}

#[test]
fn attribute_transfer_with_equal_models_is_exact() {
    let r = registry(&[
        ("Ma1", &[0.5, 0.3, 0.2]),
        ("Ma2", &[0.1, 0.6, 0.3]),
        ("ma1", &[0.5, 0.3, 0.2]),
        ("ma2", &[0.1, 0.6, 0.3]),
    ]);
    let e = parse_expr("Ma2").unwrap();
    let rewritten = attribute_transfer_rewrite(&e, "Ma2", "Ma1", "ma1", "ma2");
    let f = Formula::compile(&rewritten, &r).unwrap();
    assert!(!count_provider_calls(&f).contains_key("Ma2"));
    let direct = parse_formula("Ma2", &r).unwrap().evaluate(&[]).unwrap();
    let tv = total_variation(&f.evaluate(&[]).unwrap(), &direct).unwrap();
    assert!(tv < 1e-12);
}

#[test]
fn registry_rules() {
    let mut r = Registry::new(2);
    assert!(r.add_provider(constant("union", &[0.5, 0.5])).is_err());
    assert!(r.add_provider(constant("M", &[0.2, 0.3, 0.5])).is_err());
    r.add_provider(constant("M", &[0.5, 0.5])).unwrap();
    assert!(r.add_provider(constant("M", &[0.5, 0.5])).is_err());
    assert!(r
        .add_classifier(Arc::new(TabularClassifier::new("M", 0.5)))
        .is_err());
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..7).prop_flat_map(|n| (simplex(n), simplex(n)))
}

proptest! {
    #[test]
    fn single_term_invariance(p in (2usize..7).prop_flat_map(simplex), lambda in 0.01f64..20.0) {
        let r = registry(&[("Q", &p)]);
        let d = eval(&format!("{lambda}*Q"), &r, Normalization::KlOptimal);
        for (x, &px) in p.iter().enumerate() {
            prop_assert!((d.prob(x as u32) - px).abs() < 1e-9);
        }
    }

    #[test]
    fn union_and_intersection_masses((q1, q2) in pair()) {
        let r = registry(&[("Q1", &q1), ("Q2", &q2)]);
        let u = parse_formula("union(Q1, Q2)", &r).unwrap().combined_logits(&[]).unwrap();
        let i = parse_formula("intersection(Q1, Q2)", &r).unwrap().combined_logits(&[]).unwrap();
        let lq1 = LogDistribution::from_probs(&q1).unwrap();
        let lq2 = LogDistribution::from_probs(&q2).unwrap();
        for x in 0..q1.len() {
            let (a, b) = (lq1.logp()[x].exp(), lq2.logp()[x].exp());
            prop_assert_eq!(u[x].exp(), a.max(b));
            prop_assert_eq!(i[x].exp(), a.min(b));
            prop_assert!((u[x].exp() + i[x].exp() - a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn commutativity((q1, q2) in pair()) {
        let r = registry(&[("Q1", &q1), ("Q2", &q2)]);
        for (a, b) in [
            ("Q1 + 0.7*Q2", "0.7*Q2 + Q1"),
            ("union(Q1, Q2)", "union(Q2, Q1)"),
            ("intersection(Q1, Q2)", "intersection(Q2, Q1)"),
        ] {
            let pa = eval(a, &r, Normalization::Raw);
            let pb = eval(b, &r, Normalization::Raw);
            prop_assert!(total_variation(&pa, &pb).unwrap() < 1e-12);
        }
    }

    #[test]
    fn shifting_logits_changes_nothing(
        (q1, q2) in pair(),
        shift in -30.0f64..30.0,
    ) {
        let shifted = |q: &[f64]| {
            let logits: Vec<f64> = q.iter().map(|p| p.ln() + shift).collect();
            LogDistribution::softmax(&logits).unwrap().probs()
        };
        let r = registry(&[("Q1", &q1), ("Q2", &q2)]);
        let s = registry(&[("Q1", &shifted(&q1)), ("Q2", &shifted(&q2))]);
        let text = "Q1 - 0.4*Q2 + 0.3*union(Q1, Q2)";
        let a = eval(text, &r, Normalization::Raw);
        let b = eval(text, &s, Normalization::Raw);
        prop_assert!(total_variation(&a, &b).unwrap() < 1e-9);
    }

    #[test]
    fn pretty_print_round_trips(e in expr_strategy()) {
        let text = e.to_string();
        prop_assert_eq!(parse_expr(&text).unwrap(), e, "{}", text);
    }
}

fn coefficient() -> impl Strategy<Value = f64> {
    prop_oneof![
        Just(1.0),
        Just(-1.0),
        -1e6f64..1e6,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
    ]
}

fn leaf() -> impl Strategy<Value = Atom> {
    prop_oneof![
        "[A-Z][a-z0-9_]{0,4}".prop_map(Atom::source),
        Just(Atom::Uniform {
            span: Span::default()
        }),
        ("C[0-9]", prop::option::of(1usize..500)).prop_map(|(n, k)| Atom::classifier(n, k)),
    ]
}

fn expr_strategy() -> impl Strategy<Value = Expr> {
    let atom = leaf().prop_recursive(3, 24, 3, |inner| {
        let sub = prop::collection::vec((coefficient(), inner), 1..3)
            .prop_map(Expr::sum)
            .boxed();
        prop_oneof![
            sub.clone().prop_map(|e| Atom::Group(Box::new(e))),
            (sub.clone(), sub.clone()).prop_map(|(a, b)| Atom::Union(Box::new(a), Box::new(b))),
            (sub.clone(), sub.clone())
                .prop_map(|(a, b)| Atom::Intersection(Box::new(a), Box::new(b))),
            (sub.clone(), sub).prop_map(|(a, b)| Atom::Supersede(Box::new(a), Box::new(b))),
        ]
    });
    prop::collection::vec((coefficient(), atom), 1..4).prop_map(Expr::sum)
}

use proptest::prelude::*;

use confkit::align::{levenshtein, EditOp};
use confkit::calibrate::{fit_pwlm, isotonic};
use confkit::lm::{train_ngram, Sym};
use confkit::metrics::{auc_pr, ece, eer, nce, ScoredSet};

fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..=max)
}

/// Plain recursion over prefixes; fine for short inputs.
fn naive_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive_distance(ra, rb) + usize::from(x != y);
            sub.min(naive_distance(ra, b) + 1).min(naive_distance(a, rb) + 1)
        }
    }
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![0.0f64..=1.0, (0u8..=4).prop_map(|k| k as f64 / 4.0)], n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn both_classes(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
}

proptest! {
    #[test]
    fn levenshtein_matches_recursion(a in seq(7), b in seq(7)) {
        let al = levenshtein(&a, &b);
        prop_assert_eq!(al.distance, naive_distance(&a, &b));
        prop_assert_eq!(al.replay(&a, &b), a.clone());
        let cost = al.ops.iter().filter(|op| !matches!(op, EditOp::Match { .. })).count();
        prop_assert_eq!(cost, al.distance);
    }

    #[test]
    fn levenshtein_is_a_metric(a in seq(8), b in seq(8), c in seq(8)) {
        let d = |x: &[u8], y: &[u8]| levenshtein(x, y).distance;
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn lm_distributions_sum_to_one(
        corpus in prop::collection::vec(prop::collection::vec(0u32..8, 1..7), 1..8),
        context in prop::collection::vec(0u32..10, 0..4),
        order in 1usize..=3,
    ) {
        let m = train_ngram(&corpus, order, 0.75).unwrap();
        let mut ctx = vec![Sym::Bos];
        ctx.extend(context.iter().map(|&id| m.map_id(id)));
        let mass: f64 = m.events().into_iter().map(|w| m.logprob_in_context(&ctx, w).exp()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-9, "mass {}", mass);
        for lp in m.score_sequence(&context) {
            prop_assert!(lp <= 0.0 && lp.is_finite());
        }
    }

    #[test]
    fn auc_and_eer_ignore_monotone_rescaling((scores, labels) in scored()) {
        prop_assume!(both_classes(&labels));
        let s = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        let t = ScoredSet::new(scores.iter().map(|x| 0.1 + 0.5 * x * x).collect(), labels).unwrap();
        prop_assert!((auc_pr(&s).unwrap() - auc_pr(&t).unwrap()).abs() < 1e-12);
        prop_assert!((eer(&s).unwrap() - eer(&t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metric_ranges((scores, labels) in scored()) {
        prop_assume!(both_classes(&labels));
        let s = ScoredSet::new(scores, labels).unwrap();
        let a = auc_pr(&s).unwrap();
        prop_assert!(a <= 1.0 + 1e-12 && a > 0.0);
        let e = eer(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!(nce(&s).unwrap() <= 1.0);
        let c = ece(&s, 10).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn isotonic_matches_min_max_formula(
        values in prop::collection::vec(-5.0f64..5.0, 1..9),
        weights in prop::collection::vec(0.1f64..3.0, 9),
    ) {
        let w = &weights[..values.len()];
        let fit = isotonic(&values, w);
        let n = values.len();
        for i in 0..n {
            let mut best = f64::NEG_INFINITY;
            for j in 0..=i {
                let mut inner = f64::INFINITY;
                for k in i..n {
                    let sw: f64 = w[j..=k].iter().sum();
                    let sv: f64 = values[j..=k].iter().zip(&w[j..=k]).map(|(v, w)| v * w).sum();
                    inner = inner.min(sv / sw);
                }
                best = best.max(inner);
            }
            prop_assert!((fit[i] - best).abs() < 1e-9, "i {}: {} vs {}", i, fit[i], best);
        }
    }

    #[test]
    fn pwlm_is_monotone_and_bounded(
        (scores, labels) in scored(),
        probes in prop::collection::vec(-0.5f64..1.5, 50),
    ) {
        let s = ScoredSet::new(scores, labels).unwrap();
        let map = fit_pwlm(&s, 5, 10).unwrap();
        let mut probes = probes;
        probes.sort_by(f64::total_cmp);
        let out: Vec<f64> = probes.iter().map(|&p| map.apply(p)).collect();
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

use otkd_core::metrics::{edit_distance, EvalReport};
use proptest::prelude::*;

/// Plain recursion over the three edit operations.
fn edit_distance_recursive(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = edit_distance_recursive(ra, rb) + usize::from(x != y);
            let del = edit_distance_recursive(ra, b) + 1;
            let ins = edit_distance_recursive(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..3, 0..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_recursive_definition(a in seq(6), b in seq(6)) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance_recursive(&a, &b));
    }

    #[test]
    fn metric_axioms(a in seq(8), b in seq(8), c in seq(8)) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y);
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
        prop_assert_eq!(d(&a, &b) == 0, a == b);
    }

    #[test]
    fn corpus_cer_is_edit_weighted(pairs in prop::collection::vec((prop::collection::vec(0usize..4, 0..6), prop::collection::vec(0usize..4, 1..6)), 1..8)) {
        let r = EvalReport::from_pairs(pairs.iter().map(|(h, t)| (h.as_slice(), t.as_slice())));
        let edits: usize = pairs.iter().map(|(h, t)| edit_distance(h, t)).sum();
        let reference: usize = pairs.iter().map(|(_, t)| t.len()).sum();
        prop_assert_eq!(r.total_edits, edits);
        prop_assert!((r.corpus_cer - edits as f64 / reference as f64).abs() < 1e-12);
        let exact = pairs.iter().filter(|(h, t)| h == t).count();
        prop_assert!((r.accuracy - exact as f64 / pairs.len() as f64).abs() < 1e-12);
    }
}

mod support;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ranet::metrics::{
    auc, auc_trapezoid, confusion, format_table, parse_metrics_csv, summary, ConfusionCounts,
    Report, POSITIVE_CLASS,
};
use support::pairwise_auc;

fn counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionCounts {
    ConfusionCounts { tp, fp, tn, fn_ }
}

#[test]
fn all_correct_and_all_inverted() {
    let labels = [0, 0, 0, 1, 1];
    let inverted: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
    assert_eq!(confusion(&labels, &labels, 0).unwrap(), counts(3, 0, 2, 0));
    assert_eq!(
        confusion(&inverted, &labels, 0).unwrap(),
        counts(0, 2, 0, 3)
    );
    assert!(confusion(&[0, 1], &[0], 0).is_err());
}

#[test]
fn random_confusion_matches_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let pred: Vec<usize> = (0..50).map(|_| rng.gen_range(0..2)).collect();
    let labels: Vec<usize> = (0..50).map(|_| rng.gen_range(0..2)).collect();
    let c = confusion(&pred, &labels, POSITIVE_CLASS).unwrap();
    let tally = |p: usize, l: usize| {
        pred.iter()
            .zip(&labels)
            .filter(|&(&a, &b)| a == p && b == l)
            .count() as u64
    };
    assert_eq!(
        c,
        counts(tally(0, 0), tally(0, 1), tally(1, 1), tally(1, 0))
    );
    assert_eq!(c.total(), 50);
}

#[test]
fn reported_test_row() {
    let s = summary(&counts(25, 1, 24, 0));
    let two = |v: Option<f64>| format!("{:.2}", v.unwrap());
    assert_eq!(two(s.sensitivity), "1.00");
    assert_eq!(two(s.specificity), "0.96");
    assert_eq!(two(s.precision), "0.96");
    assert_eq!(two(s.accuracy), "0.98");
    assert!((s.precision.unwrap() - 25.0 / 26.0).abs() < 1e-15);
}

#[test]
fn symmetric_and_perfect_counts() {
    let s = summary(&counts(1, 1, 1, 1));
    for v in [
        s.sensitivity,
        s.specificity,
        s.precision,
        s.recall,
        s.accuracy,
    ] {
        assert_eq!(v, Some(0.5));
    }
    let s = summary(&counts(4, 0, 6, 0));
    for v in [
        s.sensitivity,
        s.specificity,
        s.precision,
        s.recall,
        s.accuracy,
    ] {
        assert_eq!(v, Some(1.0));
    }
}

#[test]
fn undefined_metrics_are_absent() {
    let s = summary(&counts(0, 0, 5, 0));
    assert_eq!(s.sensitivity, None);
    assert_eq!(s.precision, None);
    assert_eq!(s.specificity, Some(1.0));
    assert_eq!(auc(&[0.1, 0.2], &[1, 1], 0).unwrap(), None);
}

#[test]
fn auc_edge_cases() {
    assert_eq!(
        auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1], 0).unwrap(),
        Some(1.0)
    );
    assert_eq!(
        auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1], 0).unwrap(),
        Some(0.0)
    );
    assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0], 0).unwrap(), Some(0.5));
    assert!(auc(&[f32::NAN, 0.1], &[0, 1], 0).is_err());
    assert!(auc(&[0.1], &[0, 1], 0).is_err());
}

#[test]
fn eight_random_scores_match_pairwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scores: Vec<f32> = (0..8).map(|_| rng.gen()).collect();
    let labels = [0, 1, 0, 1, 1, 0, 0, 1];
    assert_eq!(
        auc(&scores, &labels, 0).unwrap(),
        pairwise_auc(&scores, &labels)
    );
}

#[test]
fn two_hundred_tied_instances_match_pairwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..200 {
        let n = rng.gen_range(1..=12);
        // Coarse grid so ties are common.
        let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..5) as f32 / 4.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let expect = pairwise_auc(&scores, &labels);
        assert_eq!(auc(&scores, &labels, 0).unwrap(), expect);
        assert_eq!(auc_trapezoid(&scores, &labels, 0).unwrap(), expect);
    }
}

#[test]
fn report_csv_and_table() {
    let pred = [0, 0, 1, 1];
    let labels = [0, 1, 1, 0];
    let scores = [0.9, 0.6, 0.2, 0.4];
    let r = Report::new("test", &pred, &labels, &scores).unwrap();
    let parsed = parse_metrics_csv(&r.to_csv()).unwrap();
    let get = |k: &str| parsed.iter().find(|(n, _)| n == k).unwrap().1;
    assert_eq!(get("accuracy"), Some(0.5));
    assert_eq!(get("auc"), r.auc);
    assert_eq!(get("tp"), Some(1.0));
    assert_eq!(get("fn"), Some(1.0));

    let only_positive = Report::new("validation", &[0, 0], &[0, 0], &[0.7, 0.8]).unwrap();
    let parsed = parse_metrics_csv(&only_positive.to_csv()).unwrap();
    assert_eq!(parsed.iter().find(|(n, _)| n == "auc").unwrap().1, None);

    let table = format_table(&[r, only_positive]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0].split_whitespace().collect::<Vec<_>>(),
        ["split", "Sens", "Spec", "Prec", "Rec", "Acc", "AUC"]
    );
    assert_eq!(
        lines[1].split_whitespace().collect::<Vec<_>>(),
        ["test", "0.50", "0.50", "0.50", "0.50", "0.50", "0.75"]
    );
    assert!(lines[2].contains('-'));
    assert!(parse_metrics_csv("nope\n").is_err());
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f32>, Vec<usize>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..64).prop_map(|k| k as f32 / 64.0), n),
            prop::collection::vec(0usize..2, n),
        )
    })
}

proptest! {
    #[test]
    fn ratios_in_unit_interval(
        pred in prop::collection::vec(0usize..2, 1..100),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = pred.iter().map(|_| rng.gen_range(0..2)).collect();
        let c = confusion(&pred, &labels, 0).unwrap();
        prop_assert_eq!(c.total(), pred.len() as u64);
        let s = summary(&c);
        for v in [s.sensitivity, s.specificity, s.precision, s.recall, s.accuracy].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let acc = s.accuracy.unwrap();
        prop_assert_eq!((acc * c.total() as f64).round() as u64, c.tp + c.tn);
        prop_assert!((acc * c.total() as f64 - (c.tp + c.tn) as f64).abs() < 1e-9);
    }

    #[test]
    fn auc_agrees_and_is_rank_invariant((scores, labels) in labelled_scores()) {
        let base = auc(&scores, &labels, 0).unwrap();
        prop_assert_eq!(base, pairwise_auc(&scores, &labels));
        prop_assert_eq!(auc_trapezoid(&scores, &labels, 0).unwrap(), base);
        for f in [|x: f32| 3.0 * x - 1.0, |x: f32| x.exp(), |x: f32| x * x * x + x] {
            let moved: Vec<f32> = scores.iter().map(|&s| f(s)).collect();
            prop_assert_eq!(auc(&moved, &labels, 0).unwrap(), base);
        }
        if let Some(a) = base {
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}

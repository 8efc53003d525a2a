//! ROC/AUC against an independent pair-counting oracle, plus table checks.

use proptest::prelude::*;
use trimodal_core::metrics::{auc_score, classification_metrics, f1_score, roc_points, ConfusionMatrix};
use trimodal_core::nn::Rng;

/// Fraction of (positive, negative) pairs ranked correctly, ties counting one half.
fn mann_whitney(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn instance(rng: &mut Rng) -> (Vec<f64>, Vec<usize>) {
    let n = 2 + rng.below(49) as usize;
    let coarse = rng.bernoulli(0.5);
    let scores: Vec<f64> = (0..n)
        .map(|_| if coarse { rng.below(6) as f64 / 5.0 } else { rng.uniform() })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|_| usize::from(rng.bernoulli(0.5))).collect();
    labels[0] = 0;
    labels[1] = 1;
    (scores, labels)
}

#[test]
fn trapezoid_matches_pair_counting_on_500_instances() {
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (s, l) = instance(&mut rng);
        worst = worst.max((auc_score(&s, &l).unwrap() - mann_whitney(&s, &l)).abs());
    }
    assert!(worst <= 1e-12, "{worst}");
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (2usize..50).prop_flat_map(|n| {
        (
            proptest::collection::vec((0u8..8).prop_map(|k| f64::from(k) / 7.0), n),
            proptest::collection::vec(0usize..2, n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = 0;
                l[1] = 1;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn reversed_ranking_complements((s, l) in scored()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let sum = auc_score(&s, &l).unwrap() + auc_score(&neg, &l).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn roc_is_monotone((s, l) in scored()) {
        let roc = roc_points(&s, &l).unwrap();
        let pts = roc.points();
        prop_assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts[pts.len() - 1];
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in pts.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn auc_invariant_under_increasing_transform((s, l) in scored()) {
        let t: Vec<f64> = s.iter().map(|v| v * v * v + 2.0 * v - 7.0).collect();
        prop_assert_eq!(auc_score(&s, &l).unwrap(), auc_score(&t, &l).unwrap());
    }

    #[test]
    fn f1_is_harmonic_mean(tp in 0usize..50, fp in 0usize..50, fneg in 0usize..50, tn in 0usize..50) {
        prop_assume!(tp + fp + fneg + tn > 0);
        let m = classification_metrics(&ConfusionMatrix { true_pos: tp, false_pos: fp, false_neg: fneg, true_neg: tn }).unwrap();
        if m.precision + m.recall > 0.0 {
            let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - h).abs() <= 1e-9);
        }
    }
}

#[test]
fn published_table_f1_consistent() {
    // precision, recall, reported F1 (percent)
    let rows = [
        (90.2, 85.7, 87.9),
        (86.8, 83.2, 85.0),
        (84.5, 82.1, 83.3),
        (93.4, 91.2, 92.3),
    ];
    for (p, r, f) in rows {
        let (f1, degenerate) = f1_score(p / 100.0, r / 100.0);
        assert!(!degenerate);
        assert!((f1 * 100.0 - f).abs() < 0.1, "{p} {r} -> {}", f1 * 100.0);
    }
}

//! ROC/AUC and confusion metrics against brute-force oracles.

use glaucoma_cnn::metrics::{aggregate_folds, confusion, roc_auc, ConfusionMatrix};
use glaucoma_cnn::{basic_metrics, Label};
use proptest::prelude::*;

/// Mann-Whitney pair counting: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`.
fn brute_auc(labels: &[Label], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == Label::Glaucoma && lj == Label::Normal {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn scored() -> impl Strategy<Value = (Vec<Label>, Vec<f64>)> {
    // scores on a coarse grid so ties are common
    prop::collection::vec((any::<bool>(), 0u8..12), 2..100)
        .prop_filter("both classes", |v| v.iter().any(|p| p.0) && v.iter().any(|p| !p.0))
        .prop_map(|v| {
            v.into_iter().map(|(g, s)| (if g { Label::Glaucoma } else { Label::Normal }, s as f64 / 11.0)).unzip()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn trapezoid_equals_pair_counting((labels, scores) in scored()) {
        let (_, auc) = roc_auc(&labels, &scores).unwrap();
        prop_assert!((auc - brute_auc(&labels, &scores)).abs() <= 1e-9);
    }

    #[test]
    fn strictly_monotone_maps_leave_auc_unchanged((labels, scores) in scored(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let (_, auc) = roc_auc(&labels, &scores).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert_eq!(roc_auc(&labels, &mapped).unwrap().1, auc);
    }

    #[test]
    fn roc_runs_from_origin_to_corner_monotonically((labels, scores) in scored()) {
        let (roc, _) = roc_auc(&labels, &scores).unwrap();
        let first = roc.points[0];
        let last = *roc.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            prop_assert!(w[1].threshold < w[0].threshold);
        }
    }

    #[test]
    fn confusion_counts_partition_the_samples((labels, scores) in scored(), t in 0.0f64..1.0) {
        let cm = confusion(&labels, &scores, t).unwrap();
        prop_assert_eq!(cm.total(), labels.len());
        let pos = labels.iter().filter(|&&l| l == Label::Glaucoma).count();
        prop_assert_eq!(cm.tp + cm.fn_, pos);
        let r = basic_metrics(&cm);
        for v in [r.sn, r.spc, r.ppv, r.npv, r.fs, r.acc].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn perfect_and_reversed_rankings() {
    let labels = [Label::Glaucoma, Label::Glaucoma, Label::Normal, Label::Normal];
    assert_eq!(roc_auc(&labels, &[0.9, 0.8, 0.2, 0.1]).unwrap().1, 1.0);
    assert_eq!(roc_auc(&labels, &[0.1, 0.2, 0.8, 0.9]).unwrap().1, 0.0);
    assert_eq!(roc_auc(&labels, &[0.5; 4]).unwrap().1, 0.5);
}

#[test]
fn single_class_auc_is_undefined() {
    assert!(roc_auc(&[Label::Normal, Label::Normal], &[0.1, 0.2]).is_err());
}

#[test]
fn zero_denominators_are_undefined() {
    let r = basic_metrics(&ConfusionMatrix { tp: 0, fn_: 0, fp: 2, tn: 3 });
    assert_eq!(r.sn, None);
    assert_eq!(r.ppv, Some(0.0));
    assert_eq!(r.fs, Some(0.0));
}

#[test]
fn derived_confusion_matrices_match_hand_arithmetic() {
    let r = basic_metrics(&ConfusionMatrix { tp: 17, fn_: 3, fp: 1, tn: 31 });
    let want = [0.85, 31.0 / 32.0, 17.0 / 18.0, 31.0 / 34.0, 34.0 / 38.0, 48.0 / 52.0];
    for (got, want) in [r.sn, r.spc, r.ppv, r.npv, r.fs, r.acc].into_iter().zip(want) {
        assert!((got.unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn aggregate_of_identical_folds_has_zero_spread() {
    let r = basic_metrics(&ConfusionMatrix { tp: 3, fn_: 1, fp: 1, tn: 5 });
    let agg = aggregate_folds(&[r, r, r]).unwrap();
    let acc = agg.metrics[5].unwrap();
    assert_eq!((acc.mean, acc.std, acc.n), (0.8, 0.0, 3));
    assert!(agg.metrics[6].is_none());
    assert_eq!(agg.to_csv().lines().count(), 8);
}

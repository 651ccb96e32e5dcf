mod support;

use proptest::prelude::*;
use tcv2_core::eval::metrics::{auc, balanced_accuracy, quadratic_kappa};
use tcv2_core::eval::{energy_estimate, Intensity, MetricSummary};

use support::{brute_auc, kappa_oracle};

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0usize..2, n).prop_map(|mut l| {
                l[0] = 0;
                l[1] = 1;
                l
            }),
        )
    })
}

fn classes(c: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2usize..50).prop_flat_map(move |n| (prop::collection::vec(0..c, n), prop::collection::vec(0..c, n)))
}

#[test]
fn kappa_fixture_matches_confusion_matrix_oracle() {
    let (truth, pred) = ([0, 0, 1, 2], [0, 1, 1, 2]);
    let k = quadratic_kappa(&pred, &truth, 3).unwrap();
    assert!((k - kappa_oracle(&pred, &truth, 3)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn auc_matches_pair_count((scores, labels) in scored_labels()) {
        prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
    }

    #[test]
    fn auc_invariant_under_increasing_maps((scores, labels) in scored_labels(), a in 0.1f64..10.0, b in -3.0f64..3.0) {
        let base = auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(auc(&affine, &labels).unwrap(), base);
        prop_assert_eq!(auc(&exp, &labels).unwrap(), base);
    }

    #[test]
    fn auc_of_negated_scores_is_complement((scores, labels) in scored_labels()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auc(&scores, &labels).unwrap() + auc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_is_symmetric_and_matches_oracle((pred, truth) in classes(5)) {
        if let Ok(k) = quadratic_kappa(&pred, &truth, 5) {
            prop_assert!((k - quadratic_kappa(&truth, &pred, 5).unwrap()).abs() < 1e-12);
            prop_assert!((k - kappa_oracle(&pred, &truth, 5)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_agreement_scores_one((_, truth) in classes(4)) {
        prop_assert_eq!(balanced_accuracy(&truth, &truth, 4).unwrap(), 1.0);
        if let Ok(k) = quadratic_kappa(&truth, &truth, 4) {
            prop_assert!((k - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_accuracy_invariant_under_relabeling((pred, truth) in classes(4), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let relabel = |v: &[usize]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
        let a = balanced_accuracy(&pred, &truth, 4).unwrap();
        let b = balanced_accuracy(&relabel(&pred), &relabel(&truth), 4).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn energy_is_linear_in_hours_and_watts(h in 0.0f64..1e4, w in 0.0f64..1e3, k in 0.0f64..10.0, i in 0.0f64..1.0) {
        let e = energy_estimate(h, w, Intensity::Single(i)).unwrap();
        let scaled = energy_estimate(k * h, w, Intensity::Single(i)).unwrap();
        prop_assert!((scaled.energy_kwh - k * e.energy_kwh).abs() <= 1e-9 * (1.0 + scaled.energy_kwh));
        prop_assert_eq!(e.co2_kg.0, e.energy_kwh * i);
        prop_assert_eq!(e.energy_kwh, h * w / 1000.0);
    }

    #[test]
    fn summary_mean_lies_within_raws(raw in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let s = MetricSummary::from_raw("auc", raw.clone()).unwrap();
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.mean >= lo - 1e-15 && s.mean <= hi + 1e-15);
        prop_assert!(s.std >= 0.0);
        if raw.len() == 1 {
            prop_assert_eq!(s.std, 0.0);
        }
    }
}

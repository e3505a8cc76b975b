mod common;

use mts_core::metrics::{self, MetricError};
use proptest::prelude::*;

use common::{brute_ap, brute_roc, metric_instances, metric_oracle_error};

#[test]
fn ranking_metrics_match_brute_force() {
    let err = metric_oracle_error(100, 17);
    assert!(err <= 1e-9, "max error {err}");
}

#[test]
fn curve_areas_match_brute_force() {
    for (scores, labels) in metric_instances(100, 23) {
        let roc = metrics::roc_curve(&scores, &labels).unwrap();
        let (first, last) = (roc[0], roc[roc.len() - 1]);
        assert_eq!((first.x, first.y, last.x, last.y), (0.0, 0.0, 1.0, 1.0));
        let area: f64 = roc.windows(2).map(|w| (w[1].x - w[0].x) * (w[1].y + w[0].y) / 2.0).sum();
        assert!((area - brute_roc(&scores, &labels)).abs() <= 1e-9);
        assert!(roc.windows(2).all(|w| w[1].x >= w[0].x && w[1].y >= w[0].y));

        let pr = metrics::pr_curve(&scores, &labels).unwrap();
        let mut prev = 0.0;
        let mut ap = 0.0;
        for p in &pr {
            ap += (p.x - prev) * p.y;
            prev = p.x;
        }
        assert_eq!(prev, 1.0);
        assert!((ap - brute_ap(&scores, &labels)).abs() <= 1e-9);
    }
}

#[test]
fn perfect_and_reversed_rankings() {
    let labels = [0, 0, 1, 1];
    assert_eq!(metrics::roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
    assert_eq!(metrics::roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
    assert_eq!(metrics::pr_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
    // All tied: ROC one half, AP equal to prevalence.
    assert_eq!(metrics::roc_auc(&[0.5; 4], &labels).unwrap(), 0.5);
    assert_eq!(metrics::pr_auc(&[0.5; 4], &labels).unwrap(), 0.5);
}

#[test]
fn degenerate_inputs_are_errors() {
    assert_eq!(metrics::roc_auc(&[0.1, 0.2], &[1, 1]), Err(MetricError::SingleClass));
    assert_eq!(metrics::pr_auc(&[0.1, 0.2], &[0, 0]), Err(MetricError::NoPositives));
    assert!(matches!(metrics::roc_auc(&[0.1], &[1, 0]), Err(MetricError::LengthMismatch { .. })));
    assert_eq!(metrics::roc_auc(&[f64::NAN, 0.2], &[1, 0]), Err(MetricError::NonFinite { index: 0 }));
}

#[test]
fn bce_and_accuracy_by_hand() {
    let p = [0.9, 0.2, 0.6];
    let l = [1, 0, 0];
    let want = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln()) / 3.0;
    assert!((metrics::bce(&p, &l, 1e-7) - want).abs() < 1e-12);
    assert!((metrics::accuracy(&p, &l, 0.5) - 2.0 / 3.0).abs() < 1e-12);
    // Clipping keeps certain mistakes finite.
    assert!(metrics::bce(&[0.0], &[1], 1e-7).is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn monotone_transforms_preserve_ranking_metrics(
        raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60),
    ) {
        let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let mut labels: Vec<u8> = raw.iter().map(|r| u8::from(r.1)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
        let roc = metrics::roc_auc(&scores, &labels).unwrap();
        prop_assert!((roc - metrics::roc_auc(&squashed, &labels).unwrap()).abs() < 1e-12);
        prop_assert!((roc - brute_roc(&scores, &labels)).abs() < 1e-9);
        let ap = metrics::pr_auc(&scores, &labels).unwrap();
        prop_assert!((ap - brute_ap(&scores, &labels)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&roc) && (0.0..=1.0 + 1e-12).contains(&ap));
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((metrics::roc_auc(&flipped, &labels).unwrap() - (1.0 - roc)).abs() < 1e-12);
    }

    #[test]
    fn exceedance_is_monotone(scores in prop::collection::vec(0.0f64..10.0, 1..80), points in 2usize..50) {
        let grid = metrics::threshold_grid(&scores, points);
        let curve = metrics::exceedance_curve(&scores, &grid);
        prop_assert_eq!(curve.len(), grid.len());
        for w in curve.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert_eq!(*curve.last().unwrap(), 0.0);
    }
}

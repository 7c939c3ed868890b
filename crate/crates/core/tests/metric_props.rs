use orientsteer_core::evaluation::{mean_absolute_error, prediction_sd, tolerance_accuracy, EvalReport, TracePoint};
use orientsteer_core::synthetic_track::steering_histogram;
use proptest::prelude::*;

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((-0.8f64..0.8, -0.8f64..0.8), 1..64).prop_map(|v| v.into_iter().unzip())
}

#[test]
fn boundary_is_inclusive() {
    let tol = 5.0f64.to_radians();
    assert_eq!(tolerance_accuracy(&[tol], &[0.0], 5.0).unwrap(), 1.0);
    assert_eq!(tolerance_accuracy(&[tol * 1.0001], &[0.0], 5.0).unwrap(), 0.0);
}

#[test]
fn empty_and_invalid_inputs_fail() {
    assert!(tolerance_accuracy(&[], &[], 5.0).is_err());
    assert!(tolerance_accuracy(&[0.0], &[0.0], 0.0).is_err());
    assert!(prediction_sd(&[]).is_err());
    assert!(steering_histogram(&[], 5, None).is_err());
}

#[test]
fn zero_labels_fill_middle_bin() {
    let h = steering_histogram(&[0.0; 7], 3, None).unwrap();
    assert_eq!(h.counts, vec![0, 7, 0]);
}

#[test]
fn constant_predictions_have_zero_sd() {
    assert_eq!(prediction_sd(&[0.25; 9]).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn accuracy_is_a_monotone_fraction((p, t) in pairs(), tol in 0.1f64..20.0, extra in 0.0f64..10.0) {
        let a = tolerance_accuracy(&p, &t, tol).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(tolerance_accuracy(&p, &t, tol + extra).unwrap() >= a);
        let hits = (a * p.len() as f64).round();
        prop_assert!((a * p.len() as f64 - hits).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions_score_one(t in prop::collection::vec(-1.0f64..1.0, 1..40)) {
        prop_assert_eq!(tolerance_accuracy(&t, &t, 1.0).unwrap(), 1.0);
        prop_assert_eq!(mean_absolute_error(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn sd_is_shift_invariant(p in prop::collection::vec(-1.0f64..1.0, 1..40), shift in -1.0f64..1.0) {
        let shifted: Vec<f64> = p.iter().map(|x| x + shift).collect();
        prop_assert!((prediction_sd(&p).unwrap() - prediction_sd(&shifted).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn histogram_conserves_mass(labels in prop::collection::vec(-1.0f64..1.0, 1..200), bins in 1usize..50) {
        let h = steering_histogram(&labels, bins, None).unwrap();
        prop_assert_eq!(h.total(), labels.len());
        prop_assert_eq!(h.edges.len(), bins + 1);
        prop_assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn symmetric_labels_give_symmetric_counts(half in prop::collection::vec(0.0f64..1.0, 1..100), bins in 1usize..50) {
        let labels: Vec<f64> = half.iter().flat_map(|&v| [v, -v]).collect();
        let h = steering_histogram(&labels, bins, None).unwrap();
        let mut rev = h.counts.clone();
        rev.reverse();
        prop_assert_eq!(h.counts, rev);
    }

    #[test]
    fn report_agrees_with_metric_functions((p, t) in pairs()) {
        let trace: Vec<TracePoint> = p.iter().zip(&t).enumerate().map(|(i, (&prediction, &truth))| TracePoint {
            drive_id: "d".into(),
            timestamp: i as f64,
            truth,
            prediction,
        }).collect();
        let r = EvalReport::from_trace(trace, 5.0).unwrap();
        prop_assert_eq!(r.accuracy, tolerance_accuracy(&p, &t, 5.0).unwrap());
        prop_assert_eq!(r.sd, prediction_sd(&p).unwrap());
        prop_assert_eq!(r.mae, mean_absolute_error(&p, &t).unwrap());
        prop_assert_eq!(r.histogram.total(), p.len());
    }
}

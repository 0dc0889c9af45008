mod common;

use common::oracle::{scalar_oracle_worst, synthetic_stats, toy_truth, trained_second_moment_gap};
use fvc_core::features::FeatureMatrix;
use fvc_core::ivector::{accumulate_stats, train_t_matrix};
use fvc_core::math::NormalSampler;

#[test]
fn scalar_oracle_matches_every_quantity() {
    let (worst, what) = scalar_oracle_worst(100, 42);
    assert!(worst <= 1e-12, "{what} off by {worst:e}");
}

#[test]
fn trained_factors_conform_to_a_standard_prior() {
    let gap = trained_second_moment_gap();
    assert!(gap < 0.05, "second moment off identity by {gap}");
}

#[test]
fn frobenius_change_trends_down() {
    let truth = toy_truth();
    let stats = synthetic_stats(&truth, 400, 2);
    let changes = train_t_matrix(&stats, &truth.ubm, 3, 16, 3).unwrap().frobenius_changes;
    let tail = &changes[changes.len() / 2..];
    let n = tail.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = tail.iter().sum::<f64>() / n;
    let slope = tail.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum::<f64>()
        / tail.iter().enumerate().map(|(i, _)| (i as f64 - xm).powi(2)).sum::<f64>();
    assert!(slope <= 0.0, "slope {slope} over {tail:?}");
}

#[test]
fn counts_sum_to_frames_and_identical_recordings_match() {
    let truth = toy_truth();
    let mut rng = NormalSampler::new(4);
    let rows: Vec<Vec<f64>> = (0..333).map(|_| (0..3).map(|_| rng.normal(1.5, 1.5)).collect()).collect();
    let fm = FeatureMatrix::from_rows(&rows).unwrap();
    let a = accumulate_stats(&truth.ubm, &fm, "a").unwrap();
    let b = accumulate_stats(&truth.ubm, &fm, "b").unwrap();
    assert!((a.total_count() - 333.0).abs() < 1e-6);
    assert_eq!(truth.extract(&a).unwrap().values, truth.extract(&b).unwrap().values);
}

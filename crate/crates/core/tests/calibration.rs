use fvc_core::calibration::{fit_logistic, fit_pooled_gaussian, weighted_deviance};
use fvc_core::synthetic::gen_score_sets;
use fvc_core::validation::{compute_cllr, tippett_points, TrialSet};
use proptest::prelude::*;

#[test]
fn logistic_recovers_the_gaussian_coefficients() {
    let (same, diff) = gen_score_sets(0.5, -1.5, 1.0, 100_000, 31).unwrap();
    let logistic = fit_logistic(&same, &diff).unwrap();
    let gaussian = fit_pooled_gaussian(&same, &diff).unwrap();
    for m in [&logistic, &gaussian] {
        assert!((m.intercept - 1.0).abs() < 0.05, "{:?} a = {}", m.method, m.intercept);
        assert!((m.slope - 2.0).abs() < 0.05, "{:?} b = {}", m.method, m.slope);
    }
    assert!((logistic.intercept - gaussian.intercept).abs() < 0.05);
    assert!((logistic.slope - gaussian.slope).abs() < 0.05);
}

#[test]
fn single_trial_per_class_is_refused() {
    let (same, diff) = gen_score_sets(0.5, -1.5, 1.0, 1, 2).unwrap();
    assert!(fit_pooled_gaussian(&same, &diff).is_err());
}

#[test]
fn score_sets_are_seeded() {
    assert_eq!(gen_score_sets(0.5, -1.5, 1.0, 50, 4).unwrap(), gen_score_sets(0.5, -1.5, 1.0, 50, 4).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logistic_beats_the_null_model(seed in 0u64..10_000, gap in 0.2f64..2.0, n in 20usize..200) {
        let (same, diff) = gen_score_sets(gap / 2.0, -gap / 2.0, 1.0, n, seed).unwrap();
        let m = fit_logistic(&same, &diff).unwrap();
        prop_assert!(weighted_deviance(&same, &diff, m.intercept, m.slope) <= weighted_deviance(&same, &diff, 0.0, 0.0) + 1e-12);
    }

    #[test]
    fn calibration_preserves_score_order(seed in 0u64..10_000, s1 in -10.0f64..10.0, s2 in -10.0f64..10.0) {
        let (same, diff) = gen_score_sets(0.5, -1.5, 1.0, 100, seed).unwrap();
        let m = fit_pooled_gaussian(&same, &diff).unwrap();
        prop_assert!(m.slope > 0.0);
        if s1 <= s2 {
            prop_assert!(m.apply(s1) <= m.apply(s2));
        }
        prop_assert!(m.apply(-m.intercept / m.slope).abs() < 1e-9);
    }

    #[test]
    fn gaussian_ratio_matches_affine_form(seed in 0u64..10_000, s in -10.0f64..10.0) {
        let (same, diff) = gen_score_sets(0.5, -1.5, 1.0, 50, seed).unwrap();
        let m = fit_pooled_gaussian(&same, &diff).unwrap();
        let direct = m.summary.unwrap().direct_log_ratio(s).exp();
        let affine = m.apply(s).exp();
        prop_assert!((direct / affine - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cllr_is_monotone_per_trial(
        same in prop::collection::vec(-8.0f64..8.0, 1..20),
        diff in prop::collection::vec(-8.0f64..8.0, 1..20),
        i in 0usize..20,
        bump in 0.01f64..3.0,
    ) {
        let base = compute_cllr(&TrialSet::new(same.clone(), diff.clone()).unwrap());
        let mut up = same.clone();
        up[i % same.len()] += bump;
        prop_assert!(compute_cllr(&TrialSet::new(up, diff.clone()).unwrap()) < base);
        let mut down = diff.clone();
        down[i % diff.len()] -= bump;
        prop_assert!(compute_cllr(&TrialSet::new(same, down).unwrap()) < base);
    }

    #[test]
    fn cllr_ignores_duplication(
        same in prop::collection::vec(-8.0f64..8.0, 1..20),
        diff in prop::collection::vec(-8.0f64..8.0, 1..20),
    ) {
        let once = compute_cllr(&TrialSet::new(same.clone(), diff.clone()).unwrap());
        let twice = compute_cllr(&TrialSet::new([same.clone(), same].concat(), [diff.clone(), diff].concat()).unwrap());
        prop_assert!((once - twice).abs() < 1e-12);
        prop_assert!(once >= 0.0);
    }

    #[test]
    fn tippett_curves_are_monotone_and_bounded(
        same in prop::collection::vec(-8.0f64..8.0, 1..30),
        diff in prop::collection::vec(-8.0f64..8.0, 1..30),
    ) {
        let (s, d) = tippett_points(&TrialSet::new(same, diff).unwrap());
        for c in [&s, &d] {
            prop_assert!(c.points.iter().all(|p| (0.0..=1.0).contains(&p.1)));
            prop_assert!(c.points.windows(2).all(|w| w[0].0 < w[1].0));
        }
        prop_assert!(s.points.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert!(d.points.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

#[test]
fn negated_calibration_costs_more_than_nothing() {
    let (same, diff) = gen_score_sets(0.5, -1.5, 1.0, 2000, 8).unwrap();
    let m = fit_logistic(&same, &diff).unwrap();
    let flipped = |v: &[f64]| v.iter().map(|&s| m.intercept - m.slope * s).collect::<Vec<_>>();
    let good = compute_cllr(&TrialSet::new(same.iter().map(|&s| m.apply(s)).collect(), diff.iter().map(|&s| m.apply(s)).collect()).unwrap());
    let bad = compute_cllr(&TrialSet::new(flipped(&same), flipped(&diff)).unwrap());
    assert!(good < 1.0, "{good}");
    assert!(bad > 1.0, "{bad}");
}

#[test]
fn better_system_has_wider_tippett_gap() {
    let gap = |mu: f64| {
        let (same, diff) = gen_score_sets(mu, -mu, 1.0, 400, 12).unwrap();
        let m = fit_logistic(&same, &diff).unwrap();
        let trials = TrialSet::new(same.iter().map(|&s| m.apply(s)).collect(), diff.iter().map(|&s| m.apply(s)).collect()).unwrap();
        let (s, d) = tippett_points(&trials);
        s.crossing_at(0.5) - d.crossing_at(0.5)
    };
    let weak = gap(0.5);
    let strong = gap(2.0);
    assert!(strong > weak, "{strong} vs {weak}");
    assert!(weak > 0.0);
}

mod common;

use common::{oracle, rng};
use proptest::prelude::*;
use pvt_core::eval::*;

#[test]
fn metrics_match_brute_force_on_random_sets() {
    for seed in 0..100 {
        let trials = oracle::random_trials(&mut rng(seed), 10_000);
        let (cost, thr) = min_cd(&trials).unwrap();
        let (want_cost, want_thr) = oracle::min_cd(&trials, ALPHA);
        assert_eq!(cost, want_cost, "seed {seed}");
        assert_eq!(thr, want_thr, "seed {seed}");
        if let Ok(e) = eer(&trials) {
            let want = oracle::eer(&trials);
            assert!((e - want).abs() <= 1e-12, "seed {seed}: {e} vs {want}");
        }
    }
}

#[test]
fn cost_is_frr_plus_nineteen_far() {
    for (frr, far) in [(0.0, 0.0), (1.0, 0.0), (0.25, 0.5), (0.1, 0.01), (1.0 / 3.0, 1.0 / 7.0)] {
        assert_eq!(detection_cost(frr, far, ALPHA), frr + 19.0 * far);
    }
}

#[test]
fn det_csv_and_report_round_trip() {
    let trials = common::oracle::random_trials(&mut rng(7), 300);
    let dir = tempfile::tempdir().unwrap();
    let curve = det_curve(&trials).unwrap();
    write_det_csv(dir.path().join("det.csv"), &curve).unwrap();
    assert_eq!(read_det_csv(dir.path().join("det.csv")).unwrap(), curve);
    let report = CostReport::new(&trials, ALPHA).unwrap();
    report.write_json(dir.path().join("cost.json")).unwrap();
    assert_eq!(CostReport::read_json(dir.path().join("cost.json")).unwrap(), report);
    let plain: Vec<Trial> = trials.iter().map(|t| t.trial.clone()).collect();
    write_scores(dir.path().join("scores.txt"), &trials).unwrap();
    assert_eq!(read_scores(dir.path().join("scores.txt"), &plain).unwrap(), trials);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn det_curve_is_monotone(seed in 0u64..100_000) {
        let trials = oracle::random_trials(&mut rng(seed), 500);
        let curve = det_curve(&trials).unwrap();
        prop_assert_eq!(curve.first().unwrap().threshold, f64::NEG_INFINITY);
        prop_assert_eq!(curve.last().unwrap().threshold, f64::INFINITY);
        prop_assert_eq!(curve.last().unwrap().far, 0.0);
        prop_assert_eq!(curve.last().unwrap().frr, 1.0);
        for w in curve.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[1].far <= w[0].far);
            prop_assert!(w[1].frr >= w[0].frr);
        }
        for p in &curve {
            prop_assert_eq!(far_frr(&trials, p.threshold).unwrap(), (p.far, p.frr));
        }
    }

    #[test]
    fn transfer_never_beats_own_minimum(a in 0u64..100_000, b in 0u64..100_000) {
        let dev = CostReport::new(&oracle::random_trials(&mut rng(a), 400), ALPHA).unwrap();
        let test = oracle::random_trials(&mut rng(b), 400);
        let own = min_cd(&test).unwrap().0;
        prop_assert!(threshold_transfer(&dev, &test).unwrap() >= own);
    }

    #[test]
    fn unfired_targets_bound_frr(seed in 0u64..100_000) {
        let trials = oracle::random_trials(&mut rng(seed), 300);
        let nt = trials.iter().filter(|t| t.trial.is_target()).count();
        let unfired = trials.iter().filter(|t| t.trial.is_target() && !t.kws_fired).count();
        for p in det_curve(&trials).unwrap() {
            prop_assert!(p.frr >= unfired as f64 / nt as f64);
        }
    }
}

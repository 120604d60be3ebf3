use diffad_core::eval::*;
use diffad_core::iforest::threshold_for;
use diffad_core::rng::rng_from_seed;
use diffad_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn perfect_and_degenerate_predictors() {
    let pairs = [(true, true), (false, false), (true, true), (false, false)];
    let r = compute_metrics(&pairs).unwrap();
    assert_eq!([r.accuracy, r.precision, r.recall, r.f1], [1.0; 4]);
    assert!(r.warnings.is_empty());

    let r = compute_metrics(&[(false, true), (false, false), (false, true)]).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    assert!(r.warnings.contains(&MetricWarning::UndefinedPrecision));
    assert!(r.warnings.contains(&MetricWarning::UndefinedF1));
    assert!(matches!(compute_metrics(&[]), Err(Error::Contract(_))));
}

#[test]
fn harmonic_mean_of_published_pairs() {
    assert!((f1_score(0.77, 0.93) - 0.8425).abs() < 5e-5);
    assert!((f1_score(0.95, 0.51) - 0.6637).abs() < 5e-5);
    assert!((f1_score(1.00, 0.07) - 0.1308).abs() < 5e-5);
}

#[test]
fn every_published_cell_is_consistent() {
    let rows = published_f1_consistency(0.01);
    assert_eq!(rows.len(), 12);
    for r in &rows {
        assert!(
            r.consistent,
            "{} on {}: {} vs {}",
            r.result.method, r.result.dataset, r.recomputed_f1, r.result.f1
        );
    }
    let proposed: Vec<_> = rows.iter().filter(|r| r.result.method == "proposed").collect();
    assert_eq!(proposed.len(), 2);
    assert!(proposed.iter().all(|r| (r.recomputed_f1 - r.result.f1).abs() > 0.0));
}

#[test]
fn single_point_sweep_reproduces_the_headline_threshold() {
    let mut rng = rng_from_seed(1);
    let train: Vec<f64> = (0..200).map(|_| rng.random_range(0.3..0.7)).collect();
    let scored: Vec<(f64, bool)> = (0..80).map(|i| (rng.random_range(0.3..0.8), i % 4 == 0)).collect();
    let rows = sensitivity_sweep(&scored, &[0.05], &train).unwrap();
    let t = threshold_for(&train, 0.05).unwrap();
    let direct: Vec<(bool, bool)> = scored.iter().map(|&(s, a)| (s > t, a)).collect();
    assert_eq!(rows[0].threshold, t);
    assert_eq!(rows[0].report, compute_metrics(&direct).unwrap());
}

#[test]
fn sweep_flags_and_recall_never_decrease() {
    let mut rng = rng_from_seed(2);
    let train: Vec<f64> = (0..300).map(|_| rng.random_range(0.35..0.6)).collect();
    let scored: Vec<(f64, bool)> = (0..100)
        .map(|i| {
            let anomalous = i % 2 == 0;
            let s = if anomalous {
                rng.random_range(0.45..0.8)
            } else {
                rng.random_range(0.35..0.6)
            };
            (s, anomalous)
        })
        .collect();
    let grid = linear_grid(0.0, 0.5, 26);
    assert_eq!(grid.len(), 26);
    assert_eq!((grid[0], grid[25]), (0.0, 0.5));
    let rows = sensitivity_sweep(&scored, &grid, &train).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].report.counts.flagged() >= w[0].report.counts.flagged());
        assert!(w[1].report.recall >= w[0].report.recall);
    }
    assert!(sensitivity_sweep(&scored, &[0.7], &train).is_err());
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant_and_consistent(
        pairs in proptest::collection::vec(any::<(bool, bool)>(), 1..200),
        seed in any::<u64>(),
    ) {
        let r = compute_metrics(&pairs).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng_from_seed(seed));
        prop_assert_eq!(&r, &compute_metrics(&shuffled).unwrap());
        let c = r.counts;
        prop_assert_eq!(c.total(), pairs.len());
        prop_assert_eq!(r.accuracy, (c.tp + c.tn) as f64 / c.total() as f64);
        for m in [r.accuracy, r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        if r.precision + r.recall > 0.0 {
            prop_assert!((r.f1 - 2.0 * r.precision * r.recall / (r.precision + r.recall)).abs() < 1e-15);
        } else {
            prop_assert_eq!(r.f1, 0.0);
        }
    }
}

mod common;

use common::*;
use probebias_core::adjust::{evaluate_adjustment, fit, loss, loss_gradient, SplitSpec, TrainConfig};
use probebias_core::metrics::{macro_average_accuracy, overall_accuracy, predict, probe_probability};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.gen_range(2..=5);
        let per_class = rng.gen_range(1..=32 / c);
        let ds = random_scenario(&mut rng, c, per_class, (-5.0, 5.0));
        let alpha: Vec<f64> = (0..=c).map(|_| rng.gen_range(0.5..1.5)).collect();
        let analytic = loss_gradient(&ds, &alpha).unwrap();
        let numeric = finite_difference(|a| loss(&ds, a).unwrap(), &alpha, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            let scale = a.abs().max(n.abs());
            if scale > 0.0 {
                worst = worst.max((a - n).abs() / scale);
            }
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn unit_factors_give_plain_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let c = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=10);
        let ds = random_scenario(&mut rng, c, n, (-8.0, 8.0));
        let ones = vec![1.0; c + 1];
        let got = loss(&ds, &ones).unwrap();
        let want = cross_entropy_oracle(&ds);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn metrics_agree_with_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let c = rng.gen_range(1..=8);
        let (table, pairs) = random_table(&mut rng, c, 40);
        let oracle = rational_oracle(&table, &pairs);

        match oracle.overall {
            Some(r) => assert_eq!(overall_accuracy(&table).unwrap(), ratio_f64(r)),
            None => assert!(overall_accuracy(&table).is_err()),
        }
        for (k, expected) in oracle.probe.iter().enumerate() {
            let got = probe_probability(&table, &format!("k{k}"));
            match expected {
                Some(r) => assert_eq!(got.unwrap(), ratio_f64(*r)),
                None => assert!(got.is_err()),
            }
        }
        // a float sum of C terms can differ from the exact mean in the last few bits
        match oracle.macro_avg {
            Some(r) => {
                let got = macro_average_accuracy(&table).unwrap();
                assert!((got - ratio_f64(r)).abs() <= c as f64 * f64::EPSILON);
            }
            None => assert!(macro_average_accuracy(&table).is_err()),
        }
    }
}

#[test]
fn chosen_epoch_never_trains_worse_than_the_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let c = rng.gen_range(2..=5);
        let n = rng.gen_range(1..=12);
        let ds = random_scenario(&mut rng, c, n, (-4.0, 4.0));
        let cfg = TrainConfig {
            learning_rate: rng.gen_range(0.001..0.5),
            ..TrainConfig::default()
        };
        let (factors, trace) = fit(&ds, &cfg).unwrap();
        assert!(factors.training_accuracy >= trace[0].overall_accuracy);
        assert_eq!(factors.alpha, trace[factors.chosen_epoch].alpha);
    }
}

/// Best held-out macro accuracy reachable by scaling only the probe logit.
fn best_probe_scale(ds: &probebias_core::ingest::ScenarioDataset) -> (f64, f64) {
    let mut best = (0.0, f64::NAN);
    for step in 0..=200 {
        let a = 0.80 + step as f64 * 0.001;
        let alpha = [1.0, 1.0, 1.0, a];
        let acc = macro_average_accuracy(&predict(ds, Some(&alpha)).unwrap()).unwrap();
        if acc > best.0 {
            best = (acc, a);
        }
    }
    best
}

#[test]
fn mitigation_target_is_attainable_and_reached() {
    let ds = mitigation_scenario(&mut ChaCha8Rng::seed_from_u64(2024));
    let baseline = macro_average_accuracy(&predict(&ds, None).unwrap()).unwrap();
    assert_eq!(baseline, 0.0);
    let (best, _) = best_probe_scale(&ds);
    assert!(best >= 0.9, "grid optimum {best}");

    let result = evaluate_adjustment(&ds, &SplitSpec::default(), &TrainConfig::default(), 3).unwrap();
    assert_eq!(result.summary.baseline_mean, 0.0);
    assert!(result.summary.adjusted_mean >= 0.9, "{:?}", result.summary);
}

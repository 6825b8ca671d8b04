use flowdisagg::autodiff::Tensor;
use flowdisagg::data::{fit_normalizer, holdout_split, plan_folds, window_starts, WindowSample};
use flowdisagg::metrics::{nde, sae, ApplianceMetrics, MetricPair, MetricsReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn window_count_formula(len in 1usize..500, window in 1usize..80, stride in 1usize..40) {
        match window_starts(len, window, stride) {
            Ok(starts) => {
                prop_assert!(window <= len);
                prop_assert_eq!(starts.len(), (len - window) / stride + 1);
                prop_assert!(starts.windows(2).all(|p| p[1] - p[0] == stride));
                prop_assert!(starts.last().unwrap() + window <= len);
            }
            Err(_) => prop_assert!(window > len),
        }
    }

    #[test]
    fn normalization_round_trips(seed in any::<u64>(), n in 1usize..6, t in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let windows: Vec<WindowSample> = (0..n)
            .map(|i| WindowSample {
                y: Tensor::from_fn(&[3, t], |_| rng.random_range(-500.0f32..500.0)),
                x: Tensor::from_fn(&[2, t], |_| rng.random_range(0.0f32..2000.0)),
                window_start: i * t,
                normalized: false,
            })
            .collect();
        let stats = fit_normalizer(&windows).unwrap();
        for w in &windows {
            let back = stats.denormalize(&stats.normalize(w).unwrap()).unwrap();
            prop_assert!(!back.normalized);
            // Storage is f32, so the error is measured in units of the channel's std.
            for (a, b, std) in [(&back.y, &w.y, &stats.input_std), (&back.x, &w.x, &stats.target_std)] {
                for (c, s) in std.iter().enumerate() {
                    for (&p, &q) in a.row(c).iter().zip(b.row(c)) {
                        prop_assert!(((p as f64 - q as f64) / s).abs() < 1e-6, "{} vs {} (std {})", p, q, s);
                    }
                }
            }
        }
    }

    #[test]
    fn folds_partition_without_leakage(n in 4usize..80, k in 2usize..6, window in 1usize..12, stride in 1usize..12) {
        prop_assume!(k <= n);
        let plan = plan_folds(n, k, 0).unwrap();
        let sizes = plan.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let starts: Vec<usize> = (0..n).map(|i| i * stride).collect();
        let mut tested = vec![0usize; n];
        for fold in 0..k {
            let Ok(split) = plan.split(&starts, window, fold) else {
                // Only possible when every other window straddles the test block.
                continue;
            };
            let mut all: Vec<usize> = split.train.iter().chain(&split.test).chain(&split.dropped).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            split.test.iter().for_each(|&i| tested[i] += 1);
            let covered = |i: usize| starts[i]..starts[i] + window;
            for &tr in &split.train {
                for &te in &split.test {
                    let (a, b) = (covered(tr), covered(te));
                    prop_assert!(a.end <= b.start || b.end <= a.start, "train {} overlaps test {}", tr, te);
                }
            }
            if stride >= window {
                prop_assert!(split.dropped.is_empty());
            }
        }
        if stride >= window {
            prop_assert!(tested.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn holdout_keeps_time_order(n in 3usize..100, fraction in 0.2f64..0.9) {
        let starts: Vec<usize> = (0..n).map(|i| i * 32).collect();
        if let Ok(split) = holdout_split(&starts, 64, fraction, 0) {
            let n_train = (fraction * n as f64).round() as usize;
            prop_assert_eq!(split.test, (n_train..n).collect::<Vec<_>>());
            prop_assert!(split.train.iter().all(|&i| i + 1 < n_train));
            prop_assert_eq!(split.dropped, vec![n_train - 1]);
        }
    }

    #[test]
    fn report_rows_reconstruct(vals in prop::collection::vec(prop::option::of((0.0f64..5.0, 0.0f64..5.0)), 1..8)) {
        let per: Vec<ApplianceMetrics> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| ApplianceMetrics {
                name: format!("Machine {}", i + 1),
                metrics: v.map(|(nde, sae)| MetricPair { nde, sae, nde_sqrt: Some(nde.sqrt()) }),
            })
            .collect();
        let r = MetricsReport::assemble(per, true);
        let defined: Vec<(f64, f64)> = vals.iter().flatten().copied().collect();
        let total_nde: f64 = defined.iter().map(|v| v.0).sum();
        let total_sae: f64 = defined.iter().map(|v| v.1).sum();
        prop_assert!((r.total.nde - total_nde).abs() < 1e-12);
        prop_assert!((r.total.sae - total_sae).abs() < 1e-12);
        prop_assert_eq!(r.defined_count(), defined.len());
        if !defined.is_empty() {
            let m = defined.len() as f64;
            prop_assert!((r.averaged.nde - total_nde / m).abs() < 1e-12);
            prop_assert!((r.averaged.sae - total_sae / m).abs() < 1e-12);
        }
    }
}

fn brute_nde(x: &[f64], x_hat: &[f64]) -> f64 {
    let mut num = 0.0;
    for i in 0..x.len() {
        num += (x[i] - x_hat[i]).powi(2);
    }
    let mut den = 0.0;
    for v in x {
        den += v.powi(2);
    }
    num / den
}

fn brute_sae(x: &[f64], x_hat: &[f64]) -> f64 {
    let mut diff = 0.0;
    for i in 0..x.len() {
        diff += x_hat[i] - x[i];
    }
    diff.abs() / x.iter().fold(0.0, |a, b| a + b)
}

#[test]
fn metrics_agree_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3000.0)).collect();
        let x_hat: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3000.0)).collect();
        let (a, b) = (nde(&x, &x_hat).unwrap(), brute_nde(&x, &x_hat));
        assert!((a - b).abs() <= 1e-12 * b.max(1.0), "nde {a} vs {b}");
        let (a, b) = (sae(&x, &x_hat).unwrap(), brute_sae(&x, &x_hat));
        assert!((a - b).abs() <= 1e-12 * b.max(1.0), "sae {a} vs {b}");
    }
}

#[test]
fn metric_hand_cases_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<f64> = (0..50).map(|_| rng.random_range(1.0..100.0)).collect();
    let zeros = vec![0.0; x.len()];
    let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    assert_eq!(nde(&x, &x).unwrap(), 0.0);
    assert_eq!(sae(&x, &x).unwrap(), 0.0);
    assert_eq!(nde(&x, &zeros).unwrap(), 1.0);
    assert_eq!(sae(&x, &doubled).unwrap(), 1.0);
}

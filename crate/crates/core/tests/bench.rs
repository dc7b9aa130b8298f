use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use twinran::bench::*;
use twinran::stats::ks_test;

#[test]
fn default_campaign_reproduces_calibration() {
    let b = run_latency_bench(&BenchConfig::default()).unwrap();
    assert_eq!(b.cells.len(), 9);
    assert_eq!(b.samples.len(), 9 * 10_000);

    let s = b.cell(25, 10).unwrap().service;
    assert!((s.mean - 45.0).abs() <= 2.0, "{s:?}");
    assert!(s.max <= 200.0);
    let lag = b.lag_at_update(10).unwrap();
    assert!((9.0..=12.0).contains(&lag.mean), "{lag:?}");
    assert!(lag.max <= 100.0 && lag.min >= 9.0);
    let q = b.query_at_model(25).unwrap();
    assert!((q.mean - 60.0).abs() <= 2.0, "{q:?}");

    // 60 ms at 25 parameters, +4 ms per 10 parameters
    let expected_q100 = 60.0 + 0.4 * (100.0 - 25.0);
    assert!((b.query_at_model(100).unwrap().mean - expected_q100).abs() <= 2.0);

    let f = b.fits;
    assert!((f.service_vs_update.unwrap().slope - 0.28).abs() <= 0.03, "{f:?}");
    assert!((f.lag_vs_update.unwrap().slope - 0.28).abs() <= 0.03, "{f:?}");
    assert!((f.query_vs_model.unwrap().slope - 0.40).abs() <= 0.05, "{f:?}");
    for c in &b.cells {
        assert!(c.service.max <= 200.0 && c.lag.max <= 100.0 && c.query.max <= 250.0);
    }
}

#[test]
fn lag_does_not_depend_on_model_size() {
    let cfg = BenchConfig { cells: Some(vec![(50, 25), (100, 25)]), ..BenchConfig::default() };
    let b = run_latency_bench(&cfg).unwrap();
    assert!(b.fits.service_vs_update.is_none() && b.fits.query_vs_model.is_some());
    let r = lag_model_independence(&b, (50, 100), 25, 0.05).unwrap();
    assert!(!r.reject, "{r:?}");
}

/// Brute-force statistic: the largest ECDF gap over every observed point.
fn ks_statistic_naive(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |xs: &[f64], x: f64| xs.iter().filter(|&&v| v <= x).count() as f64 / xs.len() as f64;
    a.iter().chain(b).map(|&x| (ecdf(a, x) - ecdf(b, x)).abs()).fold(0.0, f64::max)
}

#[test]
fn ks_rejects_shifted_normals() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (n0, n10) = (Normal::new(0.0, 1.0).unwrap(), Normal::new(10.0, 1.0).unwrap());
    let a: Vec<f64> = (0..1000).map(|_| n0.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..1000).map(|_| n10.sample(&mut rng)).collect();
    let r = ks_test(&a, &b, 0.05).unwrap();
    assert!(r.reject);
    assert!((r.statistic - ks_statistic_naive(&a, &b)).abs() < 1e-12);
    assert!(r.p_value < 1e-100);

    let c: Vec<f64> = (0..1000).map(|_| n0.sample(&mut rng)).collect();
    let r = ks_test(&a, &c, 0.05).unwrap();
    assert!((r.statistic - ks_statistic_naive(&a, &c)).abs() < 1e-12);
}

#[test]
fn busy_twin_penalty_is_exactly_45_ms() {
    let r = run_lock_bench(&LockBenchConfig::default()).unwrap();
    assert!((r.paired_excess_ms - 45.0).abs() < 1e-9, "{r:?}");
    assert!((r.second_mean_ms - r.first_mean_ms - 45.0).abs() < 3.0, "{r:?}");
    assert!(r.distinct_paired_excess_ms.abs() < 1e-9);
    assert!((r.distinct_second_mean_ms - r.distinct_first_mean_ms).abs() < 3.0);
}

#[test]
fn limits_probe() {
    let r = run_limits_bench(&Default::default()).unwrap();
    assert_eq!(r.twin_updates_accepted, 10);
    assert!(r.twin_eleventh_rejected);
    assert_eq!(r.instance_updates_accepted, 1000);
    assert!(r.instance_1001st_rejected);
    assert!((6000..=6600).contains(&r.canonical_100_bytes), "{}", r.canonical_100_bytes);
    assert!(r.oversize_bytes > 32768 && r.oversize_rejected);
}

#[test]
fn config_checks() {
    let bad = BenchConfig { cells: Some(vec![(25, 50)]), ..BenchConfig::default() };
    assert!(matches!(run_latency_bench(&bad), Err(BenchError::InvalidConfig(_))));
    let bad = BenchConfig { repetitions: 0, ..BenchConfig::default() };
    assert!(bad.pairings().is_err());
    let bad = BenchConfig { batch_spacing_s: 10.0, ..BenchConfig::default() };
    assert!(bad.pairings().is_err());
    assert_eq!(BenchConfig::default().pairings().unwrap().len(), 9);
}

#[test]
fn equal_seeds_equal_samples() {
    let cfg = BenchConfig { repetitions: 600, ..BenchConfig::default() };
    let (a, b) = (run_latency_bench(&cfg).unwrap(), run_latency_bench(&cfg).unwrap());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let other = run_latency_bench(&BenchConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a.samples, other.samples);
}

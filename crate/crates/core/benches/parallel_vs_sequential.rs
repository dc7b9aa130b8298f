//! Latency campaign cells run through the parallel map and the sequential one.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use twinran::bench::{run_latency_bench, BenchConfig, LatencyBench};
use twinran::par;

fn cell(m: usize, u: usize) -> LatencyBench {
    let cfg = BenchConfig { cells: Some(vec![(m, u)]), repetitions: 1000, ..BenchConfig::default() };
    run_latency_bench(&cfg).expect("valid cell")
}

fn campaign(c: &mut Criterion) {
    let cells = BenchConfig::default().pairings().expect("default cells");
    let mut g = c.benchmark_group("latency campaign, 1000 reps per cell");
    g.sample_size(10);
    g.bench_with_input(BenchmarkId::new("sequential", cells.len()), &cells, |b, cells| {
        b.iter(|| par::map_sequential(cells.clone(), |(m, u)| cell(m, u)))
    });
    let label = if par::is_parallel() { "parallel" } else { "parallel (feature off)" };
    g.bench_with_input(BenchmarkId::new(label, cells.len()), &cells, |b, cells| b.iter(|| par::map(cells.clone(), |(m, u)| cell(m, u))));
    g.finish();
}

criterion_group!(benches, campaign);
criterion_main!(benches);

use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use twinran::bench::{
    lag_model_independence, run_latency_bench, run_limits_bench, run_lock_bench, BenchConfig, LatencyBench, LimitsReport,
    LockBench, LockBenchConfig,
};
use twinran::stats::{ks_test, KsResult};

use crate::report::{Checks, Out};

#[derive(Serialize)]
struct CellRow {
    model: usize,
    update: usize,
    n: usize,
    service_mean_ms: f64,
    service_min_ms: f64,
    service_max_ms: f64,
    lag_mean_ms: f64,
    lag_min_ms: f64,
    lag_max_ms: f64,
    query_mean_ms: f64,
    query_min_ms: f64,
    query_max_ms: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a BenchConfig,
    cells: &'a [twinran::bench::CellSummary],
    fits: &'a twinran::bench::LatencyFits,
    lock: &'a LockBench,
    limits: &'a LimitsReport,
    checks: [&'a Checks; 3],
}

fn write_bench(out: &Out, b: &LatencyBench) -> Result<()> {
    out.csv("samples.csv", &b.samples)?;
    out.csv(
        "cells.csv",
        b.cells.iter().map(|c| CellRow {
            model: c.model,
            update: c.update,
            n: c.service.n,
            service_mean_ms: c.service.mean,
            service_min_ms: c.service.min,
            service_max_ms: c.service.max,
            lag_mean_ms: c.lag.mean,
            lag_min_ms: c.lag.min,
            lag_max_ms: c.lag.max,
            query_mean_ms: c.query.mean,
            query_min_ms: c.query.min,
            query_max_ms: c.query.max,
        }),
    )
}

/// Calibration checks; cells missing from a custom config are skipped.
pub fn calibration_checks(b: &LatencyBench) -> Checks {
    let mut c = Checks::default();
    if let Some(cell) = b.cell(25, 10) {
        c.near("service mean at (25,10)", cell.service.mean, 45.0, 2.0, "ms");
    }
    for cell in &b.cells {
        c.at_most(&format!("service max at ({},{})", cell.model, cell.update), cell.service.max, 200.0, "ms");
        c.at_most(&format!("lag max at ({},{})", cell.model, cell.update), cell.lag.max, 100.0, "ms");
    }
    if let Ok(lag) = b.lag_at_update(10) {
        c.within("lag mean at update 10", lag.mean, 9.0, 12.0, "ms");
    }
    if let Some(min) = b.samples.iter().map(|s| s.lag_ms).reduce(f64::min) {
        c.near("lag floor", min, 9.0, 0.5, "ms");
    }
    if let Ok(q) = b.query_at_model(25) {
        c.near("query mean at model 25", q.mean, 60.0, 2.0, "ms");
    }
    if let Some(f) = b.fits.service_vs_update {
        c.near("service slope vs update size", f.slope, 0.28, 0.03, "ms/param");
    }
    if let Some(f) = b.fits.lag_vs_update {
        c.near("lag slope vs update size", f.slope, 0.28, 0.03, "ms/param");
    }
    if let Some(f) = b.fits.query_vs_model {
        c.near("query slope vs model size", f.slope, 0.40, 0.05, "ms/param");
    }
    c
}

pub fn lock_checks(l: &LockBench) -> Checks {
    let mut c = Checks::default();
    c.near("busy twin: paired excess", l.paired_excess_ms, 45.0, 1e-6, "ms");
    c.near("busy twin: second minus first", l.second_mean_ms - l.first_mean_ms, 45.0, 3.0, "ms");
    c.near("distinct twins: paired excess", l.distinct_paired_excess_ms, 0.0, 1e-6, "ms");
    c
}

pub fn limits_checks(l: &LimitsReport) -> Checks {
    let mut c = Checks::default();
    c.add("11th twin update in 1 s rejected", l.twin_eleventh_rejected && l.twin_updates_accepted == 10, format!("{} accepted", l.twin_updates_accepted));
    c.add(
        "1001st instance update in 1 s rejected",
        l.instance_1001st_rejected && l.instance_updates_accepted == 1000,
        format!("{} accepted", l.instance_updates_accepted),
    );
    c.near("canonical 100-parameter patch", l.canonical_100_bytes as f64, 6300.0, 300.0, "bytes");
    c.add("patch over 32768 bytes rejected", l.oversize_rejected && l.oversize_bytes > 32768, format!("{} bytes", l.oversize_bytes));
    c
}

pub fn lock_config(seed: u64) -> LockBenchConfig {
    LockBenchConfig { seed: seed.wrapping_add(2), ..LockBenchConfig::default() }
}

/// Checks of one `latency` run, by probe.
pub struct LatencyChecks {
    pub calibration: Checks,
    pub lock: Checks,
    pub limits: Checks,
}

impl LatencyChecks {
    pub fn all(self) -> Checks {
        let mut c = self.calibration;
        c.extend(self.lock);
        c.extend(self.limits);
        c
    }
}

pub fn run(config: &BenchConfig, out: &Out) -> Result<LatencyChecks> {
    let t = Instant::now();
    let bench = run_latency_bench(config)?;
    let wall = t.elapsed();
    let lock = run_lock_bench(&lock_config(config.seed))?;
    let limits = run_limits_bench(&config.engine)?;
    println!("latency campaign: {} samples in {:.1} s", bench.samples.len(), wall.as_secs_f64());

    let mut calibration = calibration_checks(&bench);
    calibration.add("campaign under 60 s wall", wall.as_secs() < 60, "simulated clock");
    let checks = LatencyChecks { calibration, lock: lock_checks(&lock), limits: limits_checks(&limits) };
    write_bench(out, &bench)?;
    let summary = Summary {
        config,
        cells: &bench.cells,
        fits: &bench.fits,
        lock: &lock,
        limits: &limits,
        checks: [&checks.calibration, &checks.lock, &checks.limits],
    };
    out.json("summary.json", &summary)?;
    Ok(checks)
}

#[derive(Serialize)]
struct EcdfRow {
    x: f64,
    a: f64,
    b: f64,
}

#[derive(Serialize)]
struct KsReport<'a> {
    source: &'a str,
    n_a: usize,
    n_b: usize,
    alpha: f64,
    result: KsResult,
}

fn ecdf_rows(a: &[f64], b: &[f64]) -> Vec<EcdfRow> {
    let sorted = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (sa, sb) = (sorted(a), sorted(b));
    let mut xs: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let frac = |s: &[f64], x: f64| s.partition_point(|v| *v <= x) as f64 / s.len() as f64;
    xs.into_iter().map(|x| EcdfRow { x, a: frac(&sa, x), b: frac(&sb, x) }).collect()
}

/// Two samples from files, or lag at update 25 for models 50 and 100.
pub fn kstest(config: &BenchConfig, files: Option<(Vec<f64>, Vec<f64>)>, alpha: f64, out: &Out) -> Result<Checks> {
    let mut checks = Checks::default();
    let (source, a, b, result) = match files {
        Some((a, b)) => {
            let r = ks_test(&a, &b, alpha)?;
            ("files", a, b, r)
        }
        None => {
            let cfg = BenchConfig { cells: Some(vec![(50, 25), (100, 25)]), ..config.clone() };
            let bench = run_latency_bench(&cfg)?;
            let r = lag_model_independence(&bench, (50, 100), 25, alpha)?;
            checks.add("lag at update 25: model 50 vs 100 not rejected", !r.reject, format!("D = {:.4}, p = {:.4}", r.statistic, r.p_value));
            ("lag, update 25, models 50 and 100", bench.lag_samples(50, 25), bench.lag_samples(100, 25), r)
        }
    };
    println!("KS D = {:.5} p = {:.5} reject at {alpha}: {}", result.statistic, result.p_value, result.reject);
    out.csv("ecdf.csv", ecdf_rows(&a, &b))?;
    out.json("kstest.json", &KsReport { source, n_a: a.len(), n_b: b.len(), alpha, result })?;
    Ok(checks)
}

/// Numbers of one CSV column (by name), or of the first column.
pub fn read_column(path: &std::path::Path, column: Option<&str>) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let idx = match column {
        Some(name) => r.headers()?.iter().position(|h| h == name).ok_or_else(|| anyhow::anyhow!("no column {name:?} in {}", path.display()))?,
        None => 0,
    };
    let mut xs = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = rec.get(idx).unwrap_or("");
        xs.push(field.trim().parse::<f64>().map_err(|e| anyhow::anyhow!("{}: {field:?}: {e}", path.display()))?);
    }
    Ok(xs)
}

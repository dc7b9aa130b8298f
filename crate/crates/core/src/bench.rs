//! Measurement campaigns against the engine: latency per (model, update)
//! size, the busy-twin penalty, and the service limits.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{canonical_size, ClockMode, Engine, EngineConfig, EngineError, Instance, PatchEntry, RateScope};
use crate::model::{bench_model, bench_param};
use crate::par;
use crate::stats::{fit_linear, ks_test, summary, KsResult, LinearFit, StatsError, Summary};
use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub model_sizes: Vec<usize>,
    pub update_sizes: Vec<usize>,
    /// Explicit (model, update) cells; by default every pairing with
    /// update ≤ model.
    pub cells: Option<Vec<(usize, usize)>>,
    pub repetitions: usize,
    pub batch_size: usize,
    /// Gap between consecutive updates of a batch.
    pub gap_s: f64,
    /// Gap between batch starts.
    pub batch_spacing_s: f64,
    pub seed: u64,
    pub engine: EngineConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model_sizes: vec![25, 50, 100],
            update_sizes: vec![10, 25, 50, 100],
            cells: None,
            repetitions: 10_000,
            batch_size: 500,
            gap_s: 5.0,
            batch_spacing_s: 6.0 * 3600.0,
            seed: 1,
            engine: EngineConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn pairings(&self) -> Result<Vec<(usize, usize)>, BenchError> {
        let cells = match &self.cells {
            Some(c) => c.clone(),
            None => {
                let mut out = Vec::new();
                for &m in &self.model_sizes {
                    for &u in &self.update_sizes {
                        if u <= m {
                            out.push((m, u));
                        }
                    }
                }
                out
            }
        };
        if cells.is_empty() {
            return Err(BenchError::InvalidConfig("no (model, update) cell".into()));
        }
        if let Some(&(m, u)) = cells.iter().find(|(m, u)| u > m || *u == 0) {
            return Err(BenchError::InvalidConfig(format!("update size {u} does not fit model size {m}")));
        }
        if self.repetitions == 0 || self.batch_size == 0 {
            return Err(BenchError::InvalidConfig("repetitions and batch size must be positive".into()));
        }
        if !(self.gap_s > 0.0) || !(self.batch_spacing_s > 0.0) {
            return Err(BenchError::InvalidConfig("gaps must be positive".into()));
        }
        let batch_len = self.gap_s * self.batch_size as f64;
        if self.batch_spacing_s < batch_len {
            return Err(BenchError::InvalidConfig(format!("batches of {batch_len} s overlap at spacing {} s", self.batch_spacing_s)));
        }
        Ok(cells)
    }
}

/// One repetition of one cell, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub model: usize,
    pub update: usize,
    pub rep: usize,
    pub batch: usize,
    pub service_ms: f64,
    pub lag_ms: f64,
    pub query_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub model: usize,
    pub update: usize,
    pub service: Summary,
    pub lag: Summary,
    pub query: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyFits {
    /// Mean service time against update size, at the largest model.
    pub service_vs_update: Option<LinearFit>,
    /// Mean lag against update size, over every cell.
    pub lag_vs_update: Option<LinearFit>,
    /// Mean query time against model size.
    pub query_vs_model: Option<LinearFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBench {
    pub samples: Vec<LatencySample>,
    pub cells: Vec<CellSummary>,
    pub fits: LatencyFits,
}

impl LatencyBench {
    pub fn cell(&self, model: usize, update: usize) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.model == model && c.update == update)
    }

    fn column(&self, model: usize, update: usize, f: impl Fn(&LatencySample) -> f64) -> Vec<f64> {
        self.samples.iter().filter(|s| s.model == model && s.update == update).map(f).collect()
    }

    pub fn lag_samples(&self, model: usize, update: usize) -> Vec<f64> {
        self.column(model, update, |s| s.lag_ms)
    }

    pub fn service_samples(&self, model: usize, update: usize) -> Vec<f64> {
        self.column(model, update, |s| s.service_ms)
    }

    /// Lag of every cell with this update size, pooled.
    pub fn lag_at_update(&self, update: usize) -> Result<Summary, StatsError> {
        let xs: Vec<f64> = self.samples.iter().filter(|s| s.update == update).map(|s| s.lag_ms).collect();
        summary(&xs)
    }

    /// Query time of every cell with this model size, pooled.
    pub fn query_at_model(&self, model: usize) -> Result<Summary, StatsError> {
        let xs: Vec<f64> = self.samples.iter().filter(|s| s.model == model).map(|s| s.query_ms).collect();
        summary(&xs)
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn secs(s: f64) -> Duration {
    Duration::from_micros((s * 1e6).round() as u64)
}

fn cell_seed(seed: u64, m: usize, u: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add((m * 1000 + u) as u64)
}

/// Instance holding `twins` twins of the `m`-parameter bench model, all
/// visible at the returned time.
fn bench_instance(engine: &mut Engine, name: &str, m: usize, twins: usize, seed: u64) -> Result<(crate::engine::InstanceHandle, SimTime), EngineError> {
    let h = engine.create_instance(name, ClockMode::Simulated, seed)?;
    let inst = engine.instance_mut(h)?;
    let model = inst.add_model(SimTime::ZERO, bench_model(m))?;
    let mut ready = SimTime::ZERO;
    for i in 0..twins {
        ready = ready.max(inst.create_twin(SimTime::ZERO, &format!("t{i}"), model.id(), &[])?.response_time);
    }
    Ok((h, ready))
}

fn patch(u: usize, at: SimTime, salt: usize) -> Vec<PatchEntry> {
    (0..u).map(|i| PatchEntry::set(bench_param(i), ((salt + i) % 1000) as f64, at)).collect()
}

fn run_cell(config: &BenchConfig, m: usize, u: usize) -> Result<Vec<LatencySample>, EngineError> {
    let mut engine = Engine::new(config.engine.clone());
    let (h, ready) = bench_instance(&mut engine, &format!("bench-{m}-{u}"), m, 1, cell_seed(config.seed, m, u))?;
    let inst = engine.instance_mut(h)?;
    let first = ready + Duration::from_secs(1);
    let (gap, spacing) = (secs(config.gap_s), secs(config.batch_spacing_s));
    let mut out = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let (batch, k) = (rep / config.batch_size, rep % config.batch_size);
        let at = first + spacing * batch as u32 + gap * k as u32;
        let r = inst.update_twin(at, "t0", &patch(u, at, rep))?;
        // read halfway to the next update, well clear of the write
        let q = inst.query_twin(at + gap / 2, "t0")?;
        out.push(LatencySample { model: m, update: u, rep, batch, service_ms: ms(r.service), lag_ms: ms(r.lag), query_ms: ms(q.latency) });
    }
    Ok(out)
}

/// Runs every cell (in parallel when enabled) and fits the mean trends.
pub fn run_latency_bench(config: &BenchConfig) -> Result<LatencyBench, BenchError> {
    let cells = config.pairings()?;
    let runs = par::map(cells.clone(), |(m, u)| run_cell(config, m, u));
    let mut samples = Vec::new();
    for r in runs {
        samples.extend(r?);
    }
    let mut summaries = Vec::new();
    for &(m, u) in &cells {
        let col = |f: fn(&LatencySample) -> f64| samples.iter().filter(|s| s.model == m && s.update == u).map(f).collect::<Vec<_>>();
        summaries.push(CellSummary {
            model: m,
            update: u,
            service: summary(&col(|s| s.service_ms))?,
            lag: summary(&col(|s| s.lag_ms))?,
            query: summary(&col(|s| s.query_ms))?,
        });
    }
    let largest = cells.iter().map(|c| c.0).max().expect("non-empty");
    let service_pts: Vec<(f64, f64)> =
        summaries.iter().filter(|c| c.model == largest).map(|c| (c.update as f64, c.service.mean)).collect();
    let lag_pts: Vec<(f64, f64)> = summaries.iter().map(|c| (c.update as f64, c.lag.mean)).collect();
    let mut by_model: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in &samples {
        by_model.entry(s.model).or_default().push(s.query_ms);
    }
    let query_pts: Vec<(f64, f64)> = by_model.iter().map(|(&m, xs)| (m as f64, xs.iter().sum::<f64>() / xs.len() as f64)).collect();
    let fits = LatencyFits {
        service_vs_update: optional_fit(&service_pts)?,
        lag_vs_update: optional_fit(&lag_pts)?,
        query_vs_model: optional_fit(&query_pts)?,
    };
    Ok(LatencyBench { samples, cells: summaries, fits })
}

/// A fit, or `None` when every point has the same x.
fn optional_fit(points: &[(f64, f64)]) -> Result<Option<LinearFit>, StatsError> {
    match fit_linear(points) {
        Ok(f) => Ok(Some(f)),
        Err(StatsError::DegenerateX) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Lag of two model sizes at one update size, compared with a KS test.
pub fn lag_model_independence(bench: &LatencyBench, models: (usize, usize), update: usize, alpha: f64) -> Result<KsResult, BenchError> {
    let a = bench.lag_samples(models.0, update);
    let b = bench.lag_samples(models.1, update);
    Ok(ks_test(&a, &b, alpha)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockBenchConfig {
    pub pairs: usize,
    pub model: usize,
    pub update: usize,
    pub gap_ms: f64,
    pub seed: u64,
}

impl Default for LockBenchConfig {
    fn default() -> Self {
        LockBenchConfig { pairs: 2000, model: 25, update: 10, gap_ms: 5.0, seed: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockBench {
    pub pairs: usize,
    pub first_mean_ms: f64,
    pub second_mean_ms: f64,
    /// Second op against the same draw on an idle twin (a replay of the run
    /// with the pairs spread out).
    pub paired_excess_ms: f64,
    /// Second op on a different twin than the first.
    pub distinct_first_mean_ms: f64,
    pub distinct_second_mean_ms: f64,
    pub distinct_paired_excess_ms: f64,
}

/// Service times of `pairs` op pairs, `gap` apart, on one twin or two.
fn lock_run(cfg: &LockBenchConfig, gap: Duration, same_twin: bool) -> Result<Vec<(f64, f64)>, EngineError> {
    let mut engine = Engine::new(EngineConfig::default());
    let (h, ready) = bench_instance(&mut engine, "lock", cfg.model, 2, cfg.seed)?;
    let inst: &mut Instance = engine.instance_mut(h)?;
    let mut out = Vec::with_capacity(cfg.pairs);
    let start = ready + Duration::from_secs(1);
    for p in 0..cfg.pairs {
        let at = start + Duration::from_secs(2) * p as u32;
        let a = inst.update_twin(at, "t0", &patch(cfg.update, at, p))?;
        let second = if same_twin { "t0" } else { "t1" };
        let b = inst.update_twin(at + gap, second, &patch(cfg.update, at + gap, p + 1))?;
        out.push((ms(a.service), ms(b.service)));
    }
    Ok(out)
}

/// Pairs of updates `gap_ms` apart. The idle replay uses a 1 s gap, so its
/// draws are the same and only the busy-twin wait differs.
pub fn run_lock_bench(cfg: &LockBenchConfig) -> Result<LockBench, BenchError> {
    if cfg.pairs == 0 || !(cfg.gap_ms >= 0.0) || cfg.gap_ms >= 1000.0 || cfg.update > cfg.model {
        return Err(BenchError::InvalidConfig(format!("{cfg:?}")));
    }
    let gap = Duration::from_micros((cfg.gap_ms * 1e3).round() as u64);
    let busy = lock_run(cfg, gap, true)?;
    let idle = lock_run(cfg, Duration::from_secs(1), true)?;
    let other = lock_run(cfg, gap, false)?;
    let other_idle = lock_run(cfg, Duration::from_secs(1), false)?;
    let n = cfg.pairs as f64;
    let mean = |xs: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| xs.iter().map(f).sum::<f64>() / n;
    let excess = |a: &[(f64, f64)], b: &[(f64, f64)]| a.iter().zip(b).map(|(x, y)| x.1 - y.1).sum::<f64>() / n;
    Ok(LockBench {
        pairs: cfg.pairs,
        first_mean_ms: mean(&busy, |p| p.0),
        second_mean_ms: mean(&busy, |p| p.1),
        paired_excess_ms: excess(&busy, &idle),
        distinct_first_mean_ms: mean(&other, |p| p.0),
        distinct_second_mean_ms: mean(&other, |p| p.1),
        distinct_paired_excess_ms: excess(&other, &other_idle),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitsReport {
    pub twin_updates_accepted: u32,
    pub twin_eleventh_rejected: bool,
    pub instance_updates_accepted: u32,
    pub instance_1001st_rejected: bool,
    pub canonical_100_bytes: usize,
    pub oversize_bytes: usize,
    pub oversize_rejected: bool,
}

/// Probes the per-twin and per-instance rate gates and the patch size limit.
pub fn run_limits_bench(engine_config: &EngineConfig) -> Result<LimitsReport, BenchError> {
    let limits = engine_config.limits;
    let per_twin = limits.max_updates_per_twin_per_second;
    let per_instance = limits.max_updates_per_instance_per_second;

    let mut engine = Engine::new(engine_config.clone());
    let (h, ready) = bench_instance(&mut engine, "twin-gate", 1, 1, 5)?;
    let inst = engine.instance_mut(h)?;
    let start = ready + Duration::from_secs(1);
    let step = Duration::from_millis(1000 / (per_twin as u64 + 1));
    let mut accepted = 0;
    let mut eleventh = false;
    for k in 0..=per_twin {
        let at = start + step * k;
        match inst.update_twin(at, "t0", &patch(1, at, k as usize)) {
            Ok(_) => accepted += 1,
            Err(EngineError::RateLimitExceeded(RateScope::Twin)) if k == per_twin => eleventh = true,
            Err(e) => return Err(e.into()),
        }
    }

    let twins = (per_instance / per_twin + 1) as usize;
    let (h, ready) = bench_instance(&mut engine, "instance-gate", 1, twins, 6)?;
    let inst = engine.instance_mut(h)?;
    let start = ready + Duration::from_secs(1);
    let mut inst_accepted = 0;
    let mut last = false;
    for k in 0..=per_instance {
        let at = start + Duration::from_micros(k as u64 * 900);
        match inst.update_twin(at, &format!("t{}", k as usize % twins), &patch(1, at, k as usize)) {
            Ok(_) => inst_accepted += 1,
            Err(EngineError::RateLimitExceeded(RateScope::Instance)) if k == per_instance => last = true,
            Err(e) => return Err(e.into()),
        }
    }

    let at = SimTime::from_secs_f64(1e5);
    let canonical_100_bytes = canonical_size(&patch(100, at, 0));
    let (h, ready) = bench_instance(&mut engine, "size", 1000, 1, 7)?;
    let inst = engine.instance_mut(h)?;
    let big: Vec<PatchEntry> = patch(1000, ready, 0);
    let oversize_bytes = canonical_size(&big);
    let at = ready + Duration::from_secs(1);
    let big: Vec<PatchEntry> = patch(1000, at, 0);
    let oversize_rejected = matches!(inst.update_twin(at, "t0", &big), Err(EngineError::PayloadTooLarge { .. }));
    Ok(LimitsReport {
        twin_updates_accepted: accepted,
        twin_eleventh_rejected: eleventh,
        instance_updates_accepted: inst_accepted,
        instance_1001st_rejected: last,
        canonical_100_bytes,
        oversize_bytes,
        oversize_rejected: oversize_rejected && oversize_bytes > limits.max_patch_bytes,
    })
}

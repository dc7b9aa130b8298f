//! Every acceptance criterion as an in-process run with its own checks.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use twinran::bench::{run_limits_bench, run_lock_bench, BenchConfig};
use twinran::engine::{Engine, EngineConfig};
use twinran::model::MULTI_UE_SLOTS;
use twinran::ran::{IndicationReport, InsertEvent, Metric, Payload, ScenarioConfig};
use twinran::scenario::{Deployment, Profile, RunConfig};
use twinran::xapp::{plan_capacity, ue_sample, ue_twin_id, Aggregation, XappConfig, GNB_METRICS, UE_METRICS};
use twinran::{SimTime, Value};

use crate::report::{Checks, Out};
use crate::{latency, scenario, spawn};

pub const TITLES: [&str; 10] = [
    "latency calibration",
    "lag independent of model size",
    "busy-twin penalty",
    "service limits",
    "capacity rule",
    "xApp window oracle and pacing",
    "handover consistency",
    "end-to-end KPIs",
    "cost reproduction",
    "determinism",
];

#[derive(Serialize)]
pub struct Outcome {
    pub criterion: usize,
    pub title: &'static str,
    pub pass: bool,
    pub checks: Checks,
}

pub struct Options {
    pub seed: u64,
    /// Simulated length of the billing scenario.
    pub scenario_s: f64,
    pub spawn_trials: usize,
}

fn bench_config(seed: u64) -> BenchConfig {
    BenchConfig { seed, ..BenchConfig::default() }
}

fn capacity() -> Checks {
    let mut c = Checks::default();
    c.equal("plan_capacity(0.1)", plan_capacity(0.1).ok().map(|p| p.max_twins), Some(100));
    c.equal("plan_capacity(1.0)", plan_capacity(1.0).ok().map(|p| p.max_twins), Some(1000));
    for r in [0.099, 0.05, 0.0] {
        c.add(format!("plan_capacity({r}) rejected"), plan_capacity(r).is_err(), "");
    }
    c
}

/// Samples since the last dispatch, and the last dispatched values.
type Window = (BTreeMap<Metric, Vec<Value>>, BTreeMap<Metric, Value>);

/// Expected dispatches rebuilt from the raw indications.
#[derive(Default)]
struct WindowOracle {
    windows: HashMap<(u32, Arc<str>), Window>,
    entries: u64,
}

impl WindowOracle {
    fn ingest(&mut self, r: &IndicationReport) {
        match &r.payload {
            Payload::Insert(InsertEvent::HandoverNeeded { ue, source, target, .. }) => {
                let id: Arc<str> = ue_twin_id(*ue).into();
                self.windows.remove(&(*source, id.clone()));
                self.windows.insert((*target, id), Default::default());
            }
            Payload::Insert(_) => {}
            Payload::Report { ues, cell } => {
                let gnb = &mut self.windows.entry((r.cell, format!("gnb-{}", r.cell).into())).or_default().0;
                if let Some(p) = cell.tx_power {
                    gnb.entry(Metric::TxPower).or_default().push(Value::Float(p));
                }
                if let Some(n) = cell.connected_ues {
                    gnb.entry(Metric::ConnectedUes).or_default().push(Value::Int(n));
                }
                for u in ues {
                    let w = &mut self.windows.entry((r.cell, ue_twin_id(u.ue).into())).or_default().0;
                    for m in UE_METRICS {
                        if let Some(v) = ue_sample(&u.metrics, m) {
                            w.entry(m).or_default().push(v);
                        }
                    }
                }
            }
        }
    }

    fn expect(&mut self, cell: u32, twin: &Arc<str>) -> Vec<(String, Value)> {
        let order: &[Metric] = if twin.starts_with("gnb-") { &GNB_METRICS } else { &UE_METRICS };
        let (samples, last) = self.windows.entry((cell, twin.clone())).or_default();
        let mut out = Vec::new();
        for &m in order {
            let Some(s) = samples.get(&m).filter(|s| !s.is_empty()) else { continue };
            let n = s.len() as i64;
            let value = match twinran::xapp::aggregation(m) {
                Aggregation::Latest => *s.last().expect("non-empty"),
                Aggregation::IntMean => {
                    let sum: i64 = s.iter().map(|v| if let Value::Int(i) = v { *i } else { 0 }).sum();
                    Value::Int((2 * sum + n).div_euclid(2 * n))
                }
                Aggregation::FloatMean => {
                    // samples sit on a 1/1024 grid, so the sum is exact
                    let num: i64 = s.iter().map(|v| if let Value::Float(f) = v { (f * 1024.0) as i64 } else { 0 }).sum();
                    Value::Float(num as f64 / (1024 * n) as f64)
                }
            };
            if last.get(&m) != Some(&value) {
                out.push((m.property().to_string(), value));
                last.insert(m, value);
            }
        }
        samples.clear();
        out
    }
}

fn deployment(scenario: ScenarioConfig, record: bool) -> Result<Deployment> {
    let xapp = XappConfig { granularity_s: scenario.granularity_s, record_dispatches: record, ..XappConfig::default() };
    let mut d = Deployment::new(Engine::new(EngineConfig::default()), scenario, xapp)?;
    d.start(SimTime::ZERO)?;
    Ok(d)
}

fn xapp_oracle(seed: u64) -> Result<Checks> {
    let mut d = deployment(ScenarioConfig { seed, ..ScenarioConfig::default() }, true)?;
    let mut oracle = WindowOracle::default();
    let mut batch = Vec::new();
    let mut mismatches = 0u64;
    let mut first = String::new();
    while d.now() < SimTime::from_secs_f64(60.0) {
        d.step(&mut |r| batch.push(r.clone()))?;
        for rec in d.bridge.take_dispatches() {
            if !rec.cell_instance {
                continue;
            }
            let expected = oracle.expect(rec.cell, &rec.twin);
            let got: Vec<(String, Value)> = rec.entries.iter().filter_map(|(p, v)| v.map(|v| (p.to_string(), v))).collect();
            if got != expected || got.len() != rec.entries.len() {
                mismatches += 1;
                if first.is_empty() {
                    first = format!("{} in cell {}", rec.twin, rec.cell);
                }
            }
            oracle.entries += got.len() as u64;
        }
        for r in batch.drain(..) {
            oracle.ingest(&r);
        }
    }
    let mut c = Checks::default();
    c.add("dispatches equal the window-diff oracle", mismatches == 0, format!("{} entries, {mismatches} mismatches {first}", oracle.entries));
    let peak_twin = d.engine.instances().map(|i| i.stats().peak_twin_rate).max().unwrap_or(0);
    let peak_inst = d.engine.instances().map(|i| i.stats().peak_instance_rate).max().unwrap_or(0);
    let limited: u64 = d.engine.instances().map(|i| i.stats().rate_limited).sum();
    c.at_most("peak updates per twin per second", peak_twin as f64, 10.0, "");
    c.at_most("peak updates per instance per second", peak_inst as f64, 1000.0, "");
    c.equal("rate-limited calls", limited, 0);
    Ok(c)
}

fn handovers(seed: u64) -> Result<Checks> {
    let cfg = ScenarioConfig { cells: 4, ues_per_cell: 20, hysteresis_db: 1e3, granularity_s: 0.1, seed, ..ScenarioConfig::default() };
    let mut d = deployment(cfg, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(50));
    let mut done = 0;
    while done < 50 {
        d.run_until(d.now() + Duration::from_millis(300), &mut |_| {})?;
        let ue = rng.random_range(0..80u32);
        let target = rng.random_range(1..=4u32);
        if d.network.force_handover(ue, target)?.is_some() {
            done += 1;
        }
    }
    d.run_until(d.now() + Duration::from_millis(300), &mut |_| {})?;
    let settled = d.settle(Duration::from_secs(10))?;
    d.run_until(d.now() + Duration::from_millis(500), &mut |_| {})?;

    let mut c = Checks::default();
    c.add("bridge quiescent", settled && d.bridge.is_quiescent(), "");
    let truth: BTreeMap<u32, u32> = d.network.attachment().into_iter().enumerate().map(|(u, c)| (u as u32, c)).collect();
    c.add("attachment equals emulator", d.bridge.attachment() == truth, format!("{} UEs", truth.len()));
    c.equal("handovers seen", d.bridge.stats().handovers, 50);
    let mut serves: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for cell in 1..=4u32 {
        let Some(h) = d.bridge.cell_instance(cell) else { continue };
        for r in d.engine.instance(h)?.relationships() {
            serves.entry(r.target.clone()).or_default().push(cell);
        }
    }
    let one_rel = truth.iter().all(|(u, cell)| serves.get(&ue_twin_id(*u)) == Some(&vec![*cell]));
    c.add("one gNB relationship per UE, to the serving cell", one_rel && serves.len() == truth.len(), "");
    let multi = d.engine.instance(d.bridge.multi_instance().expect("multi instance"))?;
    let mut slots = 0;
    let mut slot_ok = true;
    for cell in 1..=4u32 {
        slots += (1..=MULTI_UE_SLOTS).filter(|k| multi.property(&format!("cell-{cell}"), &format!("UE{k}.Location")).is_some()).count();
    }
    for (&u, &cell) in &truth {
        slot_ok &= d.bridge.multi_slot(u).is_some_and(|(sc, _)| sc == cell);
    }
    c.add("one multi-instance slot per UE", slot_ok && slots == truth.len(), format!("{slots} occupied"));
    Ok(c)
}

fn files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        if e.file_type()?.is_file() {
            out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?);
        }
    }
    Ok(out)
}

/// Runs each output-producing command twice and compares the files.
fn determinism(opts: &Options, out: &Out) -> Result<Checks> {
    let mut c = Checks::default();
    let short = RunConfig { duration_s: 60.0, spawn_trials: 3, ..RunConfig::profile(Profile::BillingCalibrated) }.with_seed(opts.seed);
    let spawn_run = spawn::SpawnRun { trials: 5, ..spawn::SpawnRun::default() };
    for (name, k) in [("latency", 0), ("kstest", 1), ("scenario", 2), ("spawn", 3)] {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let dir = out.path(&format!("determinism/{name}-{rep}"));
            let o = Out::create(&dir)?;
            match k {
                0 => {
                    latency::run(&BenchConfig { repetitions: 1000, ..bench_config(opts.seed) }, &o)?;
                }
                1 => {
                    latency::kstest(&bench_config(opts.seed), None, 0.05, &o)?;
                }
                2 => {
                    scenario::run(&short, &o)?;
                }
                _ => {
                    spawn::run(&spawn_run, &o)?;
                }
            }
            runs.push(files(&dir)?);
        }
        let same = runs[0] == runs[1];
        c.add(format!("{name}: byte-identical outputs"), same && !runs[0].is_empty(), format!("{} files", runs[0].len()));
    }
    Ok(c)
}

pub fn run(which: &[usize], opts: &Options, out: &Out) -> Result<Vec<Outcome>> {
    let wanted = |k: usize| which.is_empty() || which.contains(&k);
    let mut results: BTreeMap<usize, Checks> = BTreeMap::new();
    if wanted(1) {
        let o = Out::create(&out.path("latency"))?;
        results.insert(1, latency::run(&bench_config(opts.seed), &o)?.calibration);
    }
    if wanted(2) {
        let o = Out::create(&out.path("kstest"))?;
        results.insert(2, latency::kstest(&bench_config(opts.seed), None, 0.05, &o)?);
    }
    if wanted(3) {
        results.insert(3, latency::lock_checks(&run_lock_bench(&latency::lock_config(opts.seed))?));
    }
    if wanted(4) {
        results.insert(4, latency::limits_checks(&run_limits_bench(&EngineConfig::default())?));
    }
    if wanted(5) {
        results.insert(5, capacity());
    }
    if wanted(6) {
        results.insert(6, xapp_oracle(opts.seed)?);
    }
    if wanted(7) {
        results.insert(7, handovers(opts.seed)?);
    }
    if wanted(8) || wanted(9) {
        let cfg = RunConfig { duration_s: opts.scenario_s, spawn_trials: opts.spawn_trials, ..RunConfig::profile(Profile::BillingCalibrated) }.with_seed(opts.seed);
        let o = Out::create(&out.path("scenario"))?;
        let (report, _) = scenario::run(&cfg, &o)?;
        let completed = |mut c: Checks| {
            c.add("run completed", report.aborted.is_none(), report.aborted.clone().unwrap_or_default());
            c
        };
        if wanted(8) {
            results.insert(8, completed(scenario::kpi_checks(&report)));
        }
        if wanted(9) {
            results.insert(9, completed(scenario::cost_checks(&report)));
        }
    }
    if wanted(10) {
        results.insert(10, determinism(opts, out)?);
    }
    Ok(results
        .into_iter()
        .map(|(k, checks)| Outcome { criterion: k, title: TITLES[k - 1], pass: checks.all_pass(), checks })
        .collect())
}

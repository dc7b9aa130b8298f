use std::time::Duration;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use twinran::engine::{Engine, EngineConfig};
use twinran::ran::ScenarioConfig;
use twinran::scenario::Deployment;
use twinran::stats::summary;
use twinran::whatif::{diff, snapshot_deployment, spawn_copies, GraphView, Snapshot, SpawnConfig};
use twinran::xapp::XappConfig;
use twinran::SimTime;

use crate::report::{Checks, Out};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpawnRun {
    pub scenario: ScenarioConfig,
    pub xapp: XappConfig,
    pub engine: EngineConfig,
    /// Live run before the snapshot.
    pub warmup_s: f64,
    pub copies: usize,
    pub trials: usize,
    pub spawn: SpawnConfig,
}

impl Default for SpawnRun {
    fn default() -> Self {
        SpawnRun {
            scenario: ScenarioConfig::default(),
            xapp: XappConfig::default(),
            engine: EngineConfig::default(),
            warmup_s: 5.0,
            copies: 5,
            trials: 100,
            spawn: SpawnConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct TrialRow {
    trial: usize,
    seed: u64,
    duration_s: f64,
    copies: usize,
    failures: usize,
    function_executions: u64,
}

#[derive(Serialize)]
struct SpawnSummary<'a> {
    config: &'a SpawnRun,
    twins: usize,
    relationships: usize,
    snapshot_query_units: u64,
    snapshot_operations: u64,
    mean_s: f64,
    min_s: f64,
    max_s: f64,
    function_executions: u64,
    checks: &'a Checks,
}

fn live_snapshot(run: &SpawnRun) -> Result<Snapshot> {
    let mut d = Deployment::new(Engine::new(run.engine.clone()), run.scenario.clone(), run.xapp.clone())?;
    d.start(SimTime::ZERO)?;
    let end = d.now() + Duration::from_secs_f64(run.warmup_s);
    d.run_until(end, &mut |_| {})?;
    if !d.settle(Duration::from_secs(30))? {
        bail!("deployment did not settle before the snapshot");
    }
    let at = d.now();
    Ok(snapshot_deployment(&mut d.engine, &d.bridge, at)?)
}

pub fn run(run: &SpawnRun, out: &Out) -> Result<Checks> {
    if run.trials == 0 || run.copies == 0 {
        bail!("need at least one trial and one copy");
    }
    let snap = live_snapshot(run)?;
    let reference = GraphView::from_snapshot(&snap);
    let mut rows = Vec::with_capacity(run.trials);
    let mut checks = Checks::default();
    let mut faithful = true;
    let mut executions = 0;
    for trial in 0..run.trials {
        let seed = run.spawn.seed.wrapping_add(trial as u64);
        let o = spawn_copies(&snap, run.copies, &SpawnConfig { seed, ..run.spawn.clone() }, snap.taken_at)?;
        if trial == 0 {
            for c in &o.copies {
                faithful &= diff(&c.view()?, &reference).is_empty();
            }
        }
        executions = o.function_executions;
        rows.push(TrialRow {
            trial,
            seed,
            duration_s: o.duration().as_secs_f64(),
            copies: o.copies.len(),
            failures: o.failures.len(),
            function_executions: o.function_executions,
        });
    }
    let times: Vec<f64> = rows.iter().map(|r| r.duration_s).collect();
    let s = summary(&times)?;
    let cells = run.scenario.cells;
    checks.equal("snapshot query units", snap.query_units, (cells * (run.scenario.ues_per_cell + 1)) as u64);
    checks.equal("function executions per spawn", executions, run.spawn.executions.total(run.copies, cells + 1));
    checks.add("copies equal the snapshot", faithful, "first trial, every copy");
    checks.equal("failed copies", rows.iter().map(|r| r.failures).sum::<usize>(), 0);
    if run.copies == 5 && run.scenario == ScenarioConfig::default() {
        checks.near(&format!("spawn-5 mean over {} trials", run.trials), s.mean, 22.0, 3.0, "s");
        checks.at_most("spawn-5 max", s.max, 34.0, "s");
    }
    println!("spawn-{}: mean {:.2} s min {:.2} s max {:.2} s over {} trials", run.copies, s.mean, s.min, s.max, run.trials);

    out.csv("trials.csv", &rows)?;
    out.text("snapshot.json", &format!("{}\n", snap.to_json()?))?;
    out.json(
        "spawn.json",
        &SpawnSummary {
            config: run,
            twins: snap.twin_count(),
            relationships: snap.relationship_count(),
            snapshot_query_units: snap.query_units,
            snapshot_operations: snap.operations,
            mean_s: s.mean,
            min_s: s.min,
            max_s: s.max,
            function_executions: executions,
            checks: &checks,
        },
    )?;
    Ok(checks)
}

//! End-to-end wiring: emulator, xApp bridge, engine and event fabric on one
//! simulated clock.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costing::{hourly_cost, CostBreakdown, HourlyUsage, PriceTable, UsageMeter};
use crate::engine::{ClockMode, Engine, EngineConfig, EngineError, EventRecord, InstanceHandle, PatchEntry};
use crate::events::{Endpoint, EventFabric, FabricConfig, Filter, RouteError, RouteId, SinkConfig, SinkStats};
use crate::model::{BuiltinModels, CELL_UE_MODEL};
use crate::ran::{to_geo, IndicationReport, Metric, Network, RanError, ScenarioConfig};
use crate::stats::summary;
use crate::time::SimTime;
use crate::value::Value;
use crate::whatif::{snapshot_deployment, spawn_copies, SpawnConfig, SpawnOutcome, WhatIfError};
use crate::xapp::{Bridge, BridgeStats, XappConfig, XappError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Ran(#[from] RanError),
    #[error(transparent)]
    Xapp(#[from] XappError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// A running network mirrored into twins by a bridge.
///
/// Each poll period the bridge ticks first (so a dispatch only sees samples
/// older than its slot), then the due indications are polled and ingested.
/// Mobility advances every `mobility_step`.
#[derive(Debug)]
pub struct Deployment {
    pub engine: Engine,
    pub network: Network,
    pub bridge: Bridge,
    pub fabric: Option<EventFabric>,
    poll: Duration,
    mobility_step: Duration,
    now: SimTime,
    next_step: SimTime,
    scratch: Vec<EventRecord>,
    events_discarded: u64,
    /// Keep drained events instead of discarding them when no fabric is set.
    pub keep_events: bool,
    event_log: Vec<EventRecord>,
}

impl Deployment {
    pub fn new(engine: Engine, scenario: ScenarioConfig, xapp: XappConfig) -> Result<Self, ScenarioError> {
        let network = Network::new(scenario)?;
        let bridge = Bridge::new(xapp)?;
        Self::with_parts(engine, network, bridge)
    }

    /// Wires an existing network and bridge (for instance an adopted one).
    pub fn with_parts(engine: Engine, network: Network, bridge: Bridge) -> Result<Self, ScenarioError> {
        let poll = Duration::from_micros((network.config().granularity_s * 1e6).round() as u64);
        if poll.is_zero() {
            return Err(RanError::NonPositiveGranularity.into());
        }
        Ok(Deployment {
            engine,
            network,
            bridge,
            fabric: None,
            poll,
            mobility_step: Duration::from_millis(100).max(poll),
            now: SimTime::ZERO,
            next_step: SimTime::ZERO,
            scratch: Vec::new(),
            events_discarded: 0,
            keep_events: false,
            event_log: Vec::new(),
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn poll_period(&self) -> Duration {
        self.poll
    }

    pub fn events_discarded(&self) -> u64 {
        self.events_discarded
    }

    /// E2 setup and a full KPM subscription for every cell at `at`.
    pub fn start(&mut self, at: SimTime) -> Result<(), ScenarioError> {
        if self.network.clock() != at {
            self.network.set_start(at)?;
        }
        self.now = at;
        self.next_step = at + self.mobility_step;
        let functions: BTreeSet<Metric> = Metric::ALL.into_iter().collect();
        let g = self.network.config().granularity_s;
        for c in 1..=self.network.cells().len() as u32 {
            let setup = self.network.e2_setup(c)?;
            self.bridge.on_e2_setup(&mut self.engine, at, &setup)?;
            self.network.subscribe(c, functions.clone(), g)?;
        }
        self.drain_events();
        Ok(())
    }

    /// Events kept while `keep_events` was set, in drain order.
    pub fn event_log(&self) -> &[EventRecord] {
        &self.event_log
    }

    pub fn take_event_log(&mut self) -> Vec<EventRecord> {
        std::mem::take(&mut self.event_log)
    }

    pub fn into_engine(self) -> Engine {
        self.engine
    }

    fn drain_events(&mut self) {
        match &mut self.fabric {
            Some(f) => f.collect(&mut self.engine, &mut self.scratch),
            None if self.keep_events => {
                for slot in self.engine.slots_mut().iter_mut().flatten() {
                    slot.drain_events_into(&mut self.event_log);
                }
            }
            None => {
                for slot in self.engine.slots_mut().iter_mut().flatten() {
                    self.events_discarded += slot.pending_events().len() as u64;
                    slot.drain_events_into(&mut self.scratch);
                    self.scratch.clear();
                }
            }
        }
    }

    /// One poll period.
    pub fn step(&mut self, observer: &mut dyn FnMut(&IndicationReport)) -> Result<(), ScenarioError> {
        self.now = self.now + self.poll;
        let now = self.now;
        while self.next_step <= now {
            self.network.step(self.mobility_step)?;
            self.next_step = self.next_step + self.mobility_step;
        }
        if let Some(f) = &mut self.fabric {
            f.advance(&mut self.engine, now);
        }
        self.bridge.tick(&mut self.engine, now)?;
        for r in self.network.poll_indications(now) {
            observer(&r);
            self.bridge.ingest_indication(&r);
        }
        self.drain_events();
        Ok(())
    }

    pub fn run_until(&mut self, end: SimTime, observer: &mut dyn FnMut(&IndicationReport)) -> Result<(), ScenarioError> {
        while self.now + self.poll <= end {
            self.step(observer)?;
        }
        Ok(())
    }

    /// Ticks without mobility or new indications until the bridge has no
    /// migration left, up to `limit`.
    pub fn settle(&mut self, limit: Duration) -> Result<bool, ScenarioError> {
        let end = self.now + limit;
        while !self.bridge.is_quiescent() && self.now < end {
            self.now = self.now + self.poll;
            self.bridge.tick(&mut self.engine, self.now)?;
            self.drain_events();
        }
        Ok(self.bridge.is_quiescent())
    }
}

/// Scenario profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 10 ms reporting, every event into a plainly deduplicated sink, no
    /// reads and no twin-to-twin traffic.
    MaxRate,
    /// The cost-model workload: max-rate reporting plus a dashboard read
    /// load, a location feed routed twin to twin, and the sink bucket tuned
    /// to the stored volume.
    BillingCalibrated,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max-rate" => Ok(Profile::MaxRate),
            "billing-calibrated" => Ok(Profile::BillingCalibrated),
            other => Err(format!("unknown profile {other:?} (max-rate, billing-calibrated)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::MaxRate => "max-rate",
            Profile::BillingCalibrated => "billing-calibrated",
        })
    }
}

/// External location feed routed into dedicated UE twins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub vehicles: usize,
    pub rate_hz: f64,
    pub speed_mps: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig { vehicles: 2, rate_hz: 5.0, speed_mps: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub duration_s: f64,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub xapp: XappConfig,
    pub engine: EngineConfig,
    pub prices: PriceTable,
    pub sink: SinkConfig,
    pub throughput_units: u32,
    pub data_explorer: bool,
    /// Direct twin reads per second across the deployment.
    pub reads_per_s: f64,
    pub fleet: Option<FleetConfig>,
    pub spawn: SpawnConfig,
    pub spawn_copies: usize,
    /// Spawn trials from the final snapshot; zero skips spawning.
    pub spawn_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::profile(Profile::BillingCalibrated)
    }
}

/// Dedup bucket giving about 4 MB per 5-minute window at 21 bytes a row
/// under the billing-calibrated workload.
pub const CALIBRATED_BUCKET_S: f64 = 300.0 / 21.0;

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let base = RunConfig {
            profile,
            duration_s: 3600.0,
            seed: 1,
            scenario: ScenarioConfig::default(),
            xapp: XappConfig::default(),
            engine: EngineConfig::default(),
            prices: PriceTable::default(),
            sink: SinkConfig::default(),
            throughput_units: 2,
            data_explorer: false,
            reads_per_s: 0.0,
            fleet: None,
            spawn: SpawnConfig::default(),
            spawn_copies: 5,
            spawn_trials: 0,
        };
        match profile {
            Profile::MaxRate => base,
            Profile::BillingCalibrated => RunConfig {
                sink: SinkConfig { bucket_s: CALIBRATED_BUCKET_S, ..SinkConfig::default() },
                data_explorer: true,
                reads_per_s: 4e6 / 3600.0,
                fleet: Some(FleetConfig::default()),
                spawn_trials: 100,
                ..base
            },
        }
    }

    /// Derives every component seed from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scenario.seed = seed.wrapping_mul(31).wrapping_add(7);
        self.xapp.seed = seed.wrapping_mul(31).wrapping_add(11);
        self.spawn.seed = seed.wrapping_mul(31).wrapping_add(13);
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.duration_s > 0.0) {
            return Err(ScenarioError::Invalid("duration must be positive".into()));
        }
        if !(self.reads_per_s >= 0.0) || !self.reads_per_s.is_finite() {
            return Err(ScenarioError::Invalid("read rate must be finite and non-negative".into()));
        }
        if !self.prices.is_valid() {
            return Err(ScenarioError::Invalid("prices must be finite and non-negative".into()));
        }
        if let Some(f) = &self.fleet {
            if f.vehicles == 0 || !(f.rate_hz > 0.0) {
                return Err(ScenarioError::Invalid("fleet needs vehicles and a positive rate".into()));
            }
        }
        if self.spawn_trials > 0 && self.spawn_copies == 0 {
            return Err(ScenarioError::Invalid("spawn trials need at least one copy".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagKpi {
    pub events: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub dead_lettered: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnKpi {
    pub copies: usize,
    pub trials: usize,
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub failures: usize,
    /// Executions billed by one spawn.
    pub function_executions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub profile: Profile,
    pub seed: u64,
    pub duration_s: f64,
    pub users: usize,
    pub usage: UsageMeter,
    pub hourly: HourlyUsage,
    pub cost: CostBreakdown,
    pub base_cost: f64,
    /// Engine cost per served user.
    pub base_per_user: f64,
    pub total_per_user: f64,
    pub messages_per_s: f64,
    pub events_per_s: f64,
    pub data_volume_mb_per_h: f64,
    pub sink: SinkStats,
    pub twin_lag: Option<LagKpi>,
    pub snapshot_query_units: Option<u64>,
    pub spawn: Option<SpawnKpi>,
    pub handovers: u64,
    pub bridge: BridgeStats,
    /// Set when a component failed; the figures then cover the run up to
    /// the failure.
    pub aborted: Option<String>,
}

impl KpiReport {
    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }
}

impl fmt::Display for KpiReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "profile {} seed {} over {:.0} s", self.profile, self.seed, self.duration_s)?;
        writeln!(f, "{:<26}{:>14}", "KPI", "value")?;
        writeln!(f, "{:<26}{:>11.1} MB/h", "data volume", self.data_volume_mb_per_h)?;
        match &self.twin_lag {
            Some(l) => writeln!(f, "{:<26}{:>8.1} / {:.0} ms", "twin-to-twin lag mean/max", l.mean_ms, l.max_ms)?,
            None => writeln!(f, "{:<26}{:>14}", "twin-to-twin lag", "-")?,
        }
        match &self.spawn {
            Some(s) => writeln!(f, "{:<26}{:>9.1} / {:.1} s", format!("spawn-{} mean/max", s.copies), s.mean_s, s.max_s)?,
            None => writeln!(f, "{:<26}{:>14}", "spawn", "-")?,
        }
        writeln!(f, "{:<26}{:>11.2} M/h", "messages", self.hourly.messages / 1e6)?;
        writeln!(f, "{:<26}{:>11.2} M/h", "operations", self.hourly.operations / 1e6)?;
        writeln!(f, "{:<26}{:>11.0} /s", "events", self.events_per_s)?;
        writeln!(f, "{:<26}{:>12.2} $/h", "base cost", self.base_cost)?;
        writeln!(f, "{:<26}{:>12.2} $/h", "total cost", self.cost.total)?;
        write!(f, "{:<26}{:>6.3} / {:.3} $/h", "per user base/total", self.base_per_user, self.total_per_user)?;
        if let Some(e) = &self.aborted {
            write!(f, "\naborted: {e}")?;
        }
        Ok(())
    }
}

struct Fleet {
    source: InstanceHandle,
    vehicles: Vec<([f64; 2], [f64; 2])>,
    area: f64,
    period: Duration,
    next: SimTime,
    routes: Vec<RouteId>,
}

impl Fleet {
    fn create(d: &mut Deployment, fabric: &mut EventFabric, cfg: &FleetConfig, seed: u64, at: SimTime) -> Result<Self, ScenarioError> {
        let docs = BuiltinModels::cell_documents();
        let prefix = d.bridge.config().prefix.clone();
        let mut ready = at;
        let mut handles = Vec::new();
        for (name, salt) in [(format!("{prefix}fleet"), 1), (format!("{prefix}twinran-fleet"), 2)] {
            let h = d.engine.create_instance(&name, ClockMode::Simulated, seed.wrapping_add(salt))?;
            let inst = d.engine.instance_mut(h)?;
            inst.upload_models(at, &docs)?;
            for k in 0..cfg.vehicles {
                ready = ready.max(inst.create_twin(at, &fleet_twin(k), CELL_UE_MODEL, &[])?.response_time);
            }
            handles.push((h, name));
        }
        let mut routes = Vec::new();
        for k in 0..cfg.vehicles {
            let endpoint = Endpoint::TwinRoute { instance: handles[1].1.clone(), twin: fleet_twin(k), path_map: Default::default() };
            routes.push(fabric.create_route(&d.engine, &handles[0].1, Filter::twin_property(&fleet_twin(k), "Location"), endpoint)?);
        }
        let area = d.network.config().area_m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vehicles = (0..cfg.vehicles)
            .map(|_| {
                let heading = rng.random_range(0.0..std::f64::consts::TAU);
                let pos = [rng.random_range(0.0..area), rng.random_range(0.0..area)];
                (pos, [heading.cos() * cfg.speed_mps, heading.sin() * cfg.speed_mps])
            })
            .collect();
        Ok(Fleet {
            source: handles[0].0,
            vehicles,
            area,
            period: Duration::from_secs_f64(1.0 / cfg.rate_hz),
            next: ready + Duration::from_secs(1),
            routes,
        })
    }

    /// Location updates due before `until`, each vehicle bouncing off the
    /// area edges.
    fn update(&mut self, engine: &mut Engine, until: SimTime) -> Result<(), ScenarioError> {
        let dt = self.period.as_secs_f64();
        while self.next < until {
            let at = self.next;
            let inst = engine.instance_mut(self.source)?;
            for (k, (pos, vel)) in self.vehicles.iter_mut().enumerate() {
                for i in 0..2 {
                    pos[i] += vel[i] * dt;
                    if !(0.0..=self.area).contains(&pos[i]) {
                        vel[i] = -vel[i];
                        pos[i] = pos[i].clamp(0.0, self.area);
                    }
                }
                let entry = PatchEntry::set("Location", Value::Point(to_geo(*pos)), at);
                inst.update_twin(at, &fleet_twin(k), &[entry])?;
            }
            self.next = self.next + self.period;
        }
        Ok(())
    }
}

fn fleet_twin(k: usize) -> String {
    format!("ue-fleet-{k}")
}

/// Round-robin direct reads over the deployment's twins.
struct Reader {
    targets: Vec<(InstanceHandle, String)>,
    rate: f64,
    owed: f64,
    next: usize,
}

impl Reader {
    fn new(engine: &Engine, bridge: &Bridge, rate: f64) -> Result<Self, ScenarioError> {
        let mut targets = Vec::new();
        for h in bridge.instances() {
            let inst = engine.instance(h)?;
            targets.extend(inst.twin_ids().map(|id| (h, id.to_string())));
        }
        Ok(Reader { targets, rate, owed: 0.0, next: 0 })
    }

    fn read(&mut self, engine: &mut Engine, now: SimTime, period: Duration) -> Result<(), ScenarioError> {
        if self.targets.is_empty() {
            return Ok(());
        }
        self.owed += self.rate * period.as_secs_f64();
        while self.owed >= 1.0 {
            self.owed -= 1.0;
            let (h, id) = &self.targets[self.next % self.targets.len()];
            self.next += 1;
            let inst = engine.instance_mut(*h)?;
            let at = now.max(inst.clock());
            match inst.get_twin(at, id) {
                Ok(_) | Err(EngineError::UnknownTwin(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

/// Runs one profile end to end and reports its KPIs and hourly cost.
///
/// A component failure stops the run; the report then covers the part that
/// ran and carries the error in `aborted`.
pub fn run_scenario(config: &RunConfig) -> Result<KpiReport, ScenarioError> {
    config.validate()?;
    let mut d = Deployment::new(Engine::new(config.engine.clone()), config.scenario.clone(), config.xapp.clone())?;
    d.start(SimTime::ZERO)?;
    let fabric_cfg = FabricConfig {
        seed: config.seed,
        throughput_units: config.throughput_units,
        data_explorer: config.data_explorer,
        dead_letter_dir: None,
    };
    let mut fabric = EventFabric::new(fabric_cfg, config.engine.latency.clone());
    let sink = fabric.add_sink(config.sink.clone())?;
    for h in d.bridge.instances() {
        let id = d.engine.instance(h)?.id().to_string();
        fabric.create_route(&d.engine, &id, Filter::all(), Endpoint::Sink(sink))?;
    }
    let now = d.now();
    let mut fleet = match &config.fleet {
        Some(f) => Some(Fleet::create(&mut d, &mut fabric, f, config.seed, now)?),
        None => None,
    };
    d.fabric = Some(fabric);
    let mut reader = Reader::new(&d.engine, &d.bridge, config.reads_per_s)?;
    let start = d.now();
    let end = start + Duration::from_secs_f64(config.duration_s);
    let period = d.poll_period();

    let mut aborted = None;
    let mut scratch = Vec::new();
    while d.now() + period <= end {
        let step = (|| -> Result<(), ScenarioError> {
            let now = d.now();
            if let Some(fl) = &mut fleet {
                fl.update(&mut d.engine, now + period)?;
                let f = d.fabric.as_mut().expect("fabric set");
                f.collect(&mut d.engine, &mut scratch);
            }
            d.step(&mut |_| {})?;
            let now = d.now();
            reader.read(&mut d.engine, now, period)
        })();
        if let Err(e) = step {
            aborted = Some(e.to_string());
            break;
        }
    }
    let ran_s = (d.now() - start).as_secs_f64().max(1e-9);
    let mut fabric = d.fabric.take().expect("fabric set");
    fabric.finish(&mut d.engine);

    let mut snapshot_query_units = None;
    let mut spawn = None;
    if aborted.is_none() && config.spawn_trials > 0 {
        match spawn_kpi(&mut d, config) {
            Ok((qu, s)) => {
                snapshot_query_units = Some(qu);
                spawn = Some(s);
            }
            Err(e) => aborted = Some(e.to_string()),
        }
    }

    let mut usage = *fabric.meter();
    for inst in d.engine.instances() {
        usage += *inst.meter();
    }
    let hourly = usage.per_hour(ran_s);
    let cost = hourly_cost(&hourly, &config.prices);
    let users = config.scenario.cells * config.scenario.ues_per_cell;
    let sink_stats = fabric.sink_stats(sink).unwrap_or_default();
    let twin_lag = fleet.as_ref().and_then(|fl| {
        let all: Vec<f64> = fl.routes.iter().flat_map(|&r| fabric.end_to_end_ms(r).iter().copied()).collect();
        let s = summary(&all).ok()?;
        let dead = fl.routes.iter().map(|&r| fabric.route_stats(r).dead_lettered).sum();
        Some(LagKpi { events: s.n, mean_ms: s.mean, max_ms: s.max, dead_lettered: dead })
    });
    Ok(KpiReport {
        profile: config.profile,
        seed: config.seed,
        duration_s: ran_s,
        users,
        usage,
        hourly,
        base_cost: cost.base(),
        base_per_user: per_user(cost.base(), users),
        total_per_user: per_user(cost.total, users),
        cost,
        messages_per_s: usage.messages as f64 / ran_s,
        events_per_s: usage.event_hub_messages as f64 / ran_s,
        data_volume_mb_per_h: sink_stats.bytes as f64 * 3600.0 / ran_s / 1e6,
        sink: sink_stats,
        twin_lag,
        snapshot_query_units,
        spawn,
        handovers: d.network.handovers(),
        bridge: *d.bridge.stats(),
        aborted,
    })
}

fn per_user(cost: f64, users: usize) -> f64 {
    if users > 0 {
        cost / users as f64
    } else {
        0.0
    }
}

/// Snapshots the deployment and spawns copies of it `spawn_trials` times.
/// One spawn's executions are billed to the deployment.
fn spawn_kpi(d: &mut Deployment, config: &RunConfig) -> Result<(u64, SpawnKpi), WhatIfError> {
    let at = d.now();
    let snap = snapshot_deployment(&mut d.engine, &d.bridge, at)?;
    let outcomes: Vec<Result<SpawnOutcome, WhatIfError>> = (0..config.spawn_trials as u64)
        .map(|t| {
            let cfg = SpawnConfig { seed: config.spawn.seed.wrapping_add(t), ..config.spawn.clone() };
            spawn_copies(&snap, config.spawn_copies, &cfg, snap.taken_at)
        })
        .collect();
    let mut times = Vec::with_capacity(outcomes.len());
    let mut failures = 0;
    let mut executions = 0;
    for o in outcomes {
        let o = o?;
        failures += o.failures.len();
        executions = o.function_executions;
        times.push(o.duration().as_secs_f64());
    }
    let s = summary(&times).map_err(|e| WhatIfError::Invalid(e.to_string()))?;
    if let Some(h) = d.bridge.multi_instance() {
        d.engine.instance_mut(h)?.meter_mut().function_executions += executions;
    }
    let kpi = SpawnKpi {
        copies: config.spawn_copies,
        trials: config.spawn_trials,
        mean_s: s.mean,
        min_s: s.min,
        max_s: s.max,
        failures,
        function_executions: executions,
    };
    Ok((snap.query_units, kpi))
}

//! The TwinRAN xApp: turns E2 indications into paced twin updates.
//!
//! Every cell gets its own twin instance holding a gNB twin and one twin per
//! attached UE. A network-wide "multi" instance holds one twin per cell whose
//! components mirror the attached UEs. Numeric KPMs are averaged over the
//! window since the twin's previous dispatch slot and only changed values
//! are sent.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{canonical_size, ClockMode, Engine, EngineError, Instance, InstanceHandle, PatchEntry};
use crate::model::{BuiltinModels, CELL_GNB_MODEL, CELL_UE_MODEL, MULTI_CELL_MODEL, MULTI_UE_SLOTS};
use crate::ran::{pathloss_db, IndicationReport, InsertEvent, Metric, Payload, SetupInfo, UeMetrics};
use crate::time::SimTime;
use crate::value::Value;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum XappError {
    #[error("update period {0} s is below the 0.1 s service limit")]
    BelowServiceLimit(f64),
    #[error("unknown cell {0}")]
    UnknownCell(u32),
    #[error("invalid bridge config: {0}")]
    InvalidConfig(String),
    #[error("transcript log: {0}")]
    Io(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Update period `R` and the largest twin count `Y` one instance can serve
/// at that period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityPlan {
    pub period_s: f64,
    pub max_twins: u32,
}

/// `Y = ⌊1000·R⌋`, from the 1000 updates/s per-instance and 10 updates/s
/// per-twin limits.
pub fn plan_capacity(period_s: f64) -> Result<CapacityPlan, XappError> {
    if !(period_s >= 0.1) || !period_s.is_finite() {
        return Err(XappError::BelowServiceLimit(period_s));
    }
    // the epsilon keeps 0.29 s from flooring to 289
    let max_twins = (1000.0 * period_s + 1e-9).floor() as u32;
    Ok(CapacityPlan { period_s, max_twins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XappConfig {
    pub granularity_s: f64,
    pub cell_rate_hz: f64,
    pub multi_rate_hz: f64,
    pub hysteresis_db: f64,
    pub seed: u64,
    /// Prepended to every instance name; lets several deployments share an engine.
    pub prefix: String,
    pub transcript_path: Option<PathBuf>,
    /// Keep every dispatch in memory (for oracles and debugging).
    pub record_dispatches: bool,
}

impl Default for XappConfig {
    fn default() -> Self {
        XappConfig {
            granularity_s: 0.01,
            cell_rate_hz: 10.0,
            multi_rate_hz: 5.0,
            hysteresis_db: 3.0,
            seed: 7,
            prefix: String::new(),
            transcript_path: None,
            record_dispatches: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Latest,
    IntMean,
    FloatMean,
}

/// Property order of a UE twin.
pub const UE_METRICS: [Metric; 10] = [
    Metric::Rnti,
    Metric::Location,
    Metric::Rsrp,
    Metric::Buffer,
    Metric::UlBler,
    Metric::UlCqi,
    Metric::DlBler,
    Metric::DlCqi,
    Metric::UlMcs,
    Metric::DlMcs,
];

pub const GNB_METRICS: [Metric; 2] = [Metric::TxPower, Metric::ConnectedUes];

/// RNTI, location and connected-UE counts are sent as the latest sample,
/// everything else as the window mean.
pub fn aggregation(m: Metric) -> Aggregation {
    match m {
        Metric::Rnti | Metric::Location | Metric::ConnectedUes => Aggregation::Latest,
        Metric::UlBler | Metric::DlBler | Metric::TxPower => Aggregation::FloatMean,
        _ => Aggregation::IntMean,
    }
}

pub fn ue_sample(m: &UeMetrics, metric: Metric) -> Option<Value> {
    match metric {
        Metric::Rnti => m.rnti.map(Value::Int),
        Metric::Location => m.location.map(Value::Point),
        Metric::Rsrp => m.rsrp.map(Value::Int),
        Metric::Buffer => m.buffer.map(Value::Int),
        Metric::UlBler => m.ul_bler.map(Value::Float),
        Metric::UlCqi => m.ul_cqi.map(Value::Int),
        Metric::DlBler => m.dl_bler.map(Value::Float),
        Metric::DlCqi => m.dl_cqi.map(Value::Int),
        Metric::UlMcs => m.ul_mcs.map(Value::Int),
        Metric::DlMcs => m.dl_mcs.map(Value::Int),
        Metric::TxPower | Metric::ConnectedUes => None,
    }
}

/// Integer mean rounded half up.
pub fn int_mean(sum: i64, n: u32) -> i64 {
    let n = n as i64;
    (2 * sum + n).div_euclid(2 * n)
}

/// Samples of one property since the last dispatch slot, plus the value
/// last sent.
#[derive(Debug, Clone, Default, PartialEq)]
struct PropWindow {
    n: u32,
    isum: i64,
    fsum: f64,
    latest: Option<Value>,
    clear: bool,
    last: Option<Value>,
}

/// Twin, generation, windows, property paths and metrics of one dispatch slot.
type SlotView<'a> = (Arc<str>, u64, &'a mut [PropWindow], &'a [Arc<str>], &'a [Metric]);

impl PropWindow {
    fn push(&mut self, v: Value) {
        self.n += 1;
        match v {
            Value::Int(i) => self.isum += i,
            Value::Float(f) => self.fsum += f,
            Value::Point(_) => {}
        }
        self.latest = Some(v);
    }

    /// `None`: nothing to report. `Some(None)`: the property is removed.
    fn windowed(&self, agg: Aggregation) -> Option<Option<Value>> {
        if self.n == 0 {
            return self.clear.then_some(None);
        }
        Some(Some(match agg {
            Aggregation::Latest => self.latest.expect("sample present"),
            Aggregation::IntMean => Value::Int(int_mean(self.isum, self.n)),
            Aggregation::FloatMean => Value::Float(self.fsum / self.n as f64),
        }))
    }

    fn changed(&self, agg: Aggregation) -> Option<Option<Value>> {
        self.windowed(agg).filter(|w| *w != self.last)
    }

    fn reset(&mut self) {
        let last = self.last;
        *self = PropWindow { last, ..PropWindow::default() };
    }

    fn current(&self) -> Option<Value> {
        self.latest.or(self.last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    Gnb,
    Ue(u32),
}

#[derive(Debug, Clone)]
struct UeTwin {
    generation: u64,
    slot: Option<usize>,
    props: [PropWindow; 10],
}

#[derive(Debug, Clone)]
struct CellCtx {
    setup: SetupInfo,
    instance: InstanceHandle,
    gnb: Arc<str>,
    gnb_props: [PropWindow; 2],
    owners: Vec<Option<Owner>>,
    due: Vec<SimTime>,
    ues: BTreeMap<u32, UeTwin>,
    multi_twin: Arc<str>,
    multi_due: SimTime,
    multi_slots: Vec<Option<u32>>,
    multi_props: Vec<[PropWindow; 2]>,
}

impl CellCtx {
    fn free_slot(&self) -> Option<usize> {
        (1..self.owners.len()).find(|&j| self.owners[j].is_none())
    }

    fn free_multi_slot(&self) -> Option<usize> {
        self.multi_slots.iter().position(Option::is_none)
    }
}

#[derive(Debug, Clone)]
struct UeBook {
    cell: u32,
    rnti: i64,
    multi_slot: Option<usize>,
    twins: BTreeSet<u32>,
    rels: BTreeSet<u32>,
    transcript: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum MigrationAction {
    CreateTwin { cell: u32 },
    CreateRelationship { cell: u32 },
    DeleteRelationship { cell: u32 },
    DeleteTwin { cell: u32 },
    ClearMultiSlot { cell: u32, slot: usize },
    SetMultiSlot { cell: u32, slot: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStep {
    #[serde(with = "crate::engine::wire::unix_micros")]
    pub at: SimTime,
    #[serde(flatten)]
    pub action: MigrationAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoverTranscript {
    pub ue: u32,
    pub source: u32,
    pub target: u32,
    #[serde(with = "crate::engine::wire::unix_micros")]
    pub started_at: SimTime,
    #[serde(with = "crate::engine::wire::opt_unix_micros")]
    pub completed_at: Option<SimTime>,
    pub steps: Vec<TranscriptStep>,
    /// Engine calls that failed and were retried on a later tick.
    pub retries: u32,
}

impl HandoverTranscript {
    pub fn count(&self, pred: impl Fn(&MigrationAction) -> bool) -> usize {
        self.steps.iter().filter(|s| pred(&s.action)).count()
    }
}

/// One evaluated dispatch slot. `entries` is empty when nothing changed.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub at: SimTime,
    pub cell: u32,
    /// False for the cell twin in the multi instance.
    pub cell_instance: bool,
    pub twin: Arc<str>,
    pub generation: u64,
    pub entries: Vec<(Arc<str>, Option<Value>)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeStats {
    pub indications: u64,
    pub reports: u64,
    pub inserts: u64,
    pub dropped_unknown_cell: u64,
    pub samples: u64,
    pub slots_evaluated: u64,
    pub patches_sent: u64,
    pub patches_split: u64,
    pub entries_sent: u64,
    pub skipped_invisible: u64,
    pub rate_deferrals: u64,
    pub dispatch_errors: u64,
    pub handovers: u64,
    pub migrations_completed: u64,
    pub migration_retries: u64,
    pub implicit_moves: u64,
    pub slot_exhausted: u64,
}

#[derive(Debug, Clone)]
pub struct Bridge {
    config: XappConfig,
    cell_plan: CapacityPlan,
    multi_plan: CapacityPlan,
    cell_period: Duration,
    multi_period: Duration,
    multi: Option<InstanceHandle>,
    cells: BTreeMap<u32, CellCtx>,
    ues: BTreeMap<u32, UeBook>,
    pending: BTreeSet<u32>,
    pending_edges: BTreeSet<(u32, u32)>,
    edges: BTreeSet<(u32, u32)>,
    ue_paths: Arc<[Arc<str>]>,
    gnb_paths: Arc<[Arc<str>]>,
    multi_paths: Arc<[[Arc<str>; 2]]>,
    next_generation: u64,
    transcripts: Vec<HandoverTranscript>,
    dispatches: Vec<DispatchRecord>,
    stats: BridgeStats,
}

fn period(hz: f64) -> Duration {
    Duration::from_micros((1e6 / hz).round() as u64)
}

/// First instant `start + k·period + offset` strictly after `at`.
fn first_due(at: SimTime, period: Duration, offset: Duration) -> SimTime {
    let p = period.as_micros() as u64;
    let k = at.as_micros().saturating_sub(offset.as_micros() as u64) / p + 1;
    SimTime::from_micros(k * p + offset.as_micros() as u64)
}

pub fn ue_twin_id(ue: u32) -> String {
    format!("ue-{ue}")
}

pub fn gnb_twin_id(cell: u32) -> String {
    format!("gnb-{cell}")
}

pub fn cell_twin_id(cell: u32) -> String {
    format!("cell-{cell}")
}

pub fn serves_id(cell: u32, ue: u32) -> String {
    format!("gnb-{cell}-serves-ue-{ue}")
}

pub fn neighbor_id(a: u32, b: u32) -> String {
    format!("cell-{a}-neighbor-cell-{b}")
}

pub fn multi_slot_path(slot: usize, metric: Metric) -> String {
    format!("UE{}.{}", slot + 1, metric.property())
}

impl Bridge {
    pub fn new(config: XappConfig) -> Result<Self, XappError> {
        if !(config.granularity_s > 0.0) {
            return Err(XappError::InvalidConfig("granularity_s must be positive".into()));
        }
        if !(config.cell_rate_hz > 0.0 && config.multi_rate_hz > 0.0) {
            return Err(XappError::InvalidConfig("update rates must be positive".into()));
        }
        let cell_plan = plan_capacity(1.0 / config.cell_rate_hz)?;
        let multi_plan = plan_capacity(1.0 / config.multi_rate_hz)?;
        if cell_plan.max_twins < 2 {
            return Err(XappError::InvalidConfig("a cell instance must fit a gNB and one UE".into()));
        }
        if let Some(p) = &config.transcript_path {
            File::create(p).map_err(|e| XappError::Io(e.to_string()))?;
        }
        let ue_paths: Vec<Arc<str>> = UE_METRICS.iter().map(|m| Arc::from(m.property())).collect();
        let gnb_paths: Vec<Arc<str>> = GNB_METRICS.iter().map(|m| Arc::from(m.property())).collect();
        let multi_paths: Vec<[Arc<str>; 2]> = (0..MULTI_UE_SLOTS)
            .map(|k| [multi_slot_path(k, Metric::Location).into(), multi_slot_path(k, Metric::Rsrp).into()])
            .collect();
        Ok(Bridge {
            cell_period: period(config.cell_rate_hz),
            multi_period: period(config.multi_rate_hz),
            config,
            cell_plan,
            multi_plan,
            multi: None,
            cells: BTreeMap::new(),
            ues: BTreeMap::new(),
            pending: BTreeSet::new(),
            pending_edges: BTreeSet::new(),
            edges: BTreeSet::new(),
            ue_paths: ue_paths.into(),
            gnb_paths: gnb_paths.into(),
            multi_paths: multi_paths.into(),
            next_generation: 1,
            transcripts: Vec::new(),
            dispatches: Vec::new(),
            stats: BridgeStats::default(),
        })
    }

    pub fn config(&self) -> &XappConfig {
        &self.config
    }

    pub fn cell_plan(&self) -> CapacityPlan {
        self.cell_plan
    }

    pub fn multi_plan(&self) -> CapacityPlan {
        self.multi_plan
    }

    pub fn stats(&self) -> &BridgeStats {
        &self.stats
    }

    pub fn multi_instance(&self) -> Option<InstanceHandle> {
        self.multi
    }

    pub fn multi_instance_id(&self) -> String {
        format!("{}twinran-multi", self.config.prefix)
    }

    pub fn cell_instance_id(&self, cell: u32) -> String {
        format!("{}twinran-cell-{cell}", self.config.prefix)
    }

    pub fn cell_instance(&self, cell: u32) -> Option<InstanceHandle> {
        self.cells.get(&cell).map(|c| c.instance)
    }

    pub fn cells(&self) -> impl Iterator<Item = u32> + '_ {
        self.cells.keys().copied()
    }

    /// All instances of the deployment, multi first.
    pub fn instances(&self) -> Vec<InstanceHandle> {
        self.multi.into_iter().chain(self.cells.values().map(|c| c.instance)).collect()
    }

    /// Serving cell of every known UE according to the bridge.
    pub fn attachment(&self) -> BTreeMap<u32, u32> {
        self.ues.iter().map(|(&u, b)| (u, b.cell)).collect()
    }

    /// Multi-instance component slot of a UE.
    pub fn multi_slot(&self, ue: u32) -> Option<(u32, usize)> {
        self.ues.get(&ue).and_then(|b| b.multi_slot.map(|k| (b.cell, k)))
    }

    pub fn neighbor_edges(&self) -> &BTreeSet<(u32, u32)> {
        &self.edges
    }

    pub fn transcripts(&self) -> &[HandoverTranscript] {
        &self.transcripts
    }

    pub fn dispatches(&self) -> &[DispatchRecord] {
        &self.dispatches
    }

    pub fn take_dispatches(&mut self) -> Vec<DispatchRecord> {
        std::mem::take(&mut self.dispatches)
    }

    /// No migration or neighbour edge is waiting for the engine.
    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty() && self.pending_edges.is_empty()
    }

    fn generation(&mut self) -> u64 {
        self.next_generation += 1;
        self.next_generation - 1
    }

    fn instance_seed(&self, cell: u32) -> u64 {
        self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(cell as u64)
    }

    /// Spawns the cell: a twin in the multi instance and a new cell instance
    /// with its gNB twin. Returns false when the cell was already set up.
    pub fn on_e2_setup(&mut self, engine: &mut Engine, at: SimTime, setup: &SetupInfo) -> Result<bool, XappError> {
        let c = setup.cell_id;
        if self.cells.contains_key(&c) {
            return Ok(false);
        }
        let multi = match self.multi {
            Some(h) => h,
            None => {
                let h = engine.create_instance(&self.multi_instance_id(), ClockMode::Simulated, self.instance_seed(0))?;
                engine.instance_mut(h)?.upload_models(at, &BuiltinModels::multi_documents())?;
                self.multi = Some(h);
                h
            }
        };
        let multi_twin = cell_twin_id(c);
        engine.instance_mut(multi)?.create_twin(
            at,
            &multi_twin,
            MULTI_CELL_MODEL,
            &[("PLMN", Value::Int(setup.plmn)), ("ARFCN", Value::Int(setup.arfcn))],
        )?;
        let h = engine.create_instance(&self.cell_instance_id(c), ClockMode::Simulated, self.instance_seed(c))?;
        let inst = engine.instance_mut(h)?;
        inst.upload_models(at, &BuiltinModels::cell_documents())?;
        let gnb = gnb_twin_id(c);
        inst.create_twin(at, &gnb, CELL_GNB_MODEL, &[])?;

        let y = self.cell_plan.max_twins as usize;
        let mut owners = vec![None; y];
        owners[0] = Some(Owner::Gnb);
        let due = (0..y).map(|j| first_due(at, self.cell_period, self.cell_period * j as u32 / y as u32)).collect();
        let ym = self.multi_plan.max_twins;
        let multi_offset = self.multi_period * ((c - 1) % ym) / ym;
        self.cells.insert(
            c,
            CellCtx {
                setup: setup.clone(),
                instance: h,
                gnb: gnb.into(),
                gnb_props: Default::default(),
                owners,
                due,
                ues: BTreeMap::new(),
                multi_twin: multi_twin.into(),
                multi_due: first_due(at, self.multi_period, multi_offset),
                multi_slots: vec![None; MULTI_UE_SLOTS],
                multi_props: vec![Default::default(); MULTI_UE_SLOTS],
            },
        );
        for &n in &setup.neighbors {
            if n != c && self.cells.contains_key(&n) {
                self.pending_edges.insert((c, n));
                self.pending_edges.insert((n, c));
            }
        }
        Ok(true)
    }

    /// Takes over instances an earlier bridge (or a spawn) already built.
    ///
    /// Cell contexts come from `setups`; UE twins, relationships and the last
    /// sent values are read back from the graph. Multi-instance slots are
    /// matched to UEs by nearest location. Nothing is written to the engine.
    pub fn adopt(config: XappConfig, engine: &Engine, setups: &[SetupInfo], at: SimTime) -> Result<Bridge, XappError> {
        let mut b = Bridge::new(config)?;
        let multi_id = b.multi_instance_id();
        let multi_h = engine.handle(&multi_id).ok_or(EngineError::UnknownInstance(multi_id))?;
        let multi = engine.instance(multi_h)?;
        b.multi = Some(multi_h);
        let mut located: BTreeMap<u32, (u32, Option<crate::value::GeoPoint>)> = BTreeMap::new();
        for setup in setups {
            let c = setup.cell_id;
            let id = b.cell_instance_id(c);
            let h = engine.handle(&id).ok_or(EngineError::UnknownInstance(id))?;
            let inst = engine.instance(h)?;
            let y = b.cell_plan.max_twins as usize;
            let mut owners = vec![None; y];
            owners[0] = Some(Owner::Gnb);
            let due = (0..y).map(|j| first_due(at, b.cell_period, b.cell_period * j as u32 / y as u32)).collect();
            let ym = b.multi_plan.max_twins;
            let multi_offset = b.multi_period * ((c - 1) % ym) / ym;
            let gnb = gnb_twin_id(c);
            let mut gnb_props: [PropWindow; 2] = Default::default();
            for (i, m) in GNB_METRICS.iter().enumerate() {
                gnb_props[i].last = inst.property(&gnb, m.property()).map(|p| p.value);
            }
            let mut ctx = CellCtx {
                setup: setup.clone(),
                instance: h,
                gnb: gnb.into(),
                gnb_props,
                owners,
                due,
                ues: BTreeMap::new(),
                multi_twin: cell_twin_id(c).into(),
                multi_due: first_due(at, b.multi_period, multi_offset),
                multi_slots: vec![None; MULTI_UE_SLOTS],
                multi_props: vec![Default::default(); MULTI_UE_SLOTS],
            };
            let linked: BTreeMap<u32, i64> = inst
                .relationships()
                .into_iter()
                .filter(|r| r.name == "serves")
                .filter_map(|r| {
                    let u = r.target.strip_prefix("ue-")?.parse().ok()?;
                    let rnti = match r.properties.get("RNTI").map(|p| p.value) {
                        Some(Value::Int(v)) => v,
                        _ => 0,
                    };
                    Some((u, rnti))
                })
                .collect();
            let ue_ids: Vec<u32> = inst.twin_ids().filter_map(|t| t.strip_prefix("ue-")?.parse().ok()).collect();
            for u in ue_ids {
                let twin = ue_twin_id(u);
                let book = b.ues.entry(u).or_insert(UeBook {
                    cell: 0,
                    rnti: 0,
                    multi_slot: None,
                    twins: BTreeSet::new(),
                    rels: BTreeSet::new(),
                    transcript: None,
                });
                book.twins.insert(c);
                let Some(&rnti) = linked.get(&u) else { continue };
                book.rels.insert(c);
                if book.cell != 0 {
                    continue;
                }
                book.cell = c;
                book.rnti = rnti;
                let generation = b.next_generation;
                b.next_generation += 1;
                let slot = ctx.free_slot();
                if let Some(j) = slot {
                    ctx.owners[j] = Some(Owner::Ue(u));
                }
                let mut props: [PropWindow; 10] = Default::default();
                for (i, m) in UE_METRICS.iter().enumerate() {
                    props[i].last = inst.property(&twin, m.property()).map(|p| p.value);
                }
                let loc = match props[1].last {
                    Some(Value::Point(p)) => Some(p),
                    _ => None,
                };
                located.insert(u, (c, loc));
                ctx.ues.insert(u, UeTwin { generation, slot, props });
            }
            // multi slots: restore last values, then pair each with the
            // closest unmatched UE of this cell
            let mut free: Vec<u32> = ctx.ues.keys().copied().collect();
            for k in 0..MULTI_UE_SLOTS {
                let w = &mut ctx.multi_props[k];
                w[0].last = multi.property(&ctx.multi_twin, &multi_slot_path(k, Metric::Location)).map(|p| p.value);
                w[1].last = multi.property(&ctx.multi_twin, &multi_slot_path(k, Metric::Rsrp)).map(|p| p.value);
                let Some(Value::Point(p)) = w[0].last else { continue };
                let best = free
                    .iter()
                    .enumerate()
                    .filter_map(|(i, u)| located[u].1.map(|q| (i, (q.lat - p.lat).hypot(q.lon - p.lon))))
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, _)) = best {
                    let u = free.remove(i);
                    ctx.multi_slots[k] = Some(u);
                    b.ues.get_mut(&u).expect("located").multi_slot = Some(k);
                }
            }
            for u in free {
                if let Some(k) = ctx.free_multi_slot() {
                    ctx.multi_slots[k] = Some(u);
                    b.ues.get_mut(&u).expect("located").multi_slot = Some(k);
                }
            }
            b.cells.insert(c, ctx);
        }
        for (a, n) in multi.relationships().iter().filter(|r| r.name == "neighbor").filter_map(|r| {
            let a = r.source.strip_prefix("cell-")?.parse::<u32>().ok()?;
            let n = r.target.strip_prefix("cell-")?.parse::<u32>().ok()?;
            Some((a, n))
        }) {
            b.edges.insert((a, n));
        }
        for setup in setups {
            for &n in &setup.neighbors {
                let c = setup.cell_id;
                if n != c && b.cells.contains_key(&n) {
                    for e in [(c, n), (n, c)] {
                        if !b.edges.contains(&e) {
                            b.pending_edges.insert(e);
                        }
                    }
                }
            }
        }
        for (&u, book) in &b.ues {
            let converged = book.cell != 0 && book.twins.len() == 1 && book.rels.len() == 1;
            if !converged {
                b.pending.insert(u);
            }
        }
        // UEs twins without any relationship: keep them, but attach them to
        // the cell holding the twin so the bookkeeping stays total
        let orphans: Vec<(u32, u32)> =
            b.ues.iter().filter(|(_, bk)| bk.cell == 0).filter_map(|(&u, bk)| bk.twins.first().map(|&c| (u, c))).collect();
        for (u, c) in orphans {
            let generation = b.generation();
            let ctx = b.cells.get_mut(&c).expect("known cell");
            let slot = ctx.free_slot();
            if let Some(j) = slot {
                ctx.owners[j] = Some(Owner::Ue(u));
            }
            ctx.ues.insert(u, UeTwin { generation, slot, props: Default::default() });
            let k = ctx.free_multi_slot();
            if let Some(k) = k {
                ctx.multi_slots[k] = Some(u);
            }
            let book = b.ues.get_mut(&u).expect("listed");
            book.cell = c;
            book.multi_slot = k;
        }
        Ok(b)
    }

    /// Attaches a UE the bridge has not seen yet.
    fn attach(&mut self, ue: u32, cell: u32, rnti: i64) {
        let generation = self.generation();
        let ctx = self.cells.get_mut(&cell).expect("known cell");
        let slot = ctx.free_slot();
        match slot {
            Some(j) => ctx.owners[j] = Some(Owner::Ue(ue)),
            None => self.stats.slot_exhausted += 1,
        }
        ctx.ues.insert(ue, UeTwin { generation, slot, props: Default::default() });
        let multi_slot = ctx.free_multi_slot();
        if let Some(k) = multi_slot {
            ctx.multi_slots[k] = Some(ue);
            ctx.multi_props[k] = Default::default();
        }
        self.ues.insert(ue, UeBook { cell, rnti, multi_slot, twins: BTreeSet::new(), rels: BTreeSet::new(), transcript: None });
        self.pending.insert(ue);
    }

    /// Buffers an indication. Reports feed the aggregation windows; inserts
    /// move the bookkeeping at once and queue engine work for the next tick.
    pub fn ingest_indication(&mut self, report: &IndicationReport) {
        self.stats.indications += 1;
        let cell = report.cell;
        if !self.cells.contains_key(&cell) {
            self.stats.dropped_unknown_cell += 1;
            return;
        }
        match &report.payload {
            Payload::Insert(ev) => {
                self.stats.inserts += 1;
                match *ev {
                    InsertEvent::HandoverNeeded { ue, rnti, source, target } => {
                        if let Err(XappError::UnknownCell(_)) = self.handle_handover(ue, rnti, source, target, report.emitted_at) {
                            self.stats.dropped_unknown_cell += 1;
                        }
                    }
                    InsertEvent::Attach { ue, rnti } => {
                        if !self.ues.contains_key(&ue) {
                            self.attach(ue, cell, rnti);
                        }
                    }
                    InsertEvent::Detach { ue, .. } => self.detach(ue),
                }
            }
            Payload::Report { ues, cell: cm } => {
                self.stats.reports += 1;
                let ctx = self.cells.get_mut(&cell).expect("known cell");
                if let Some(tx) = cm.tx_power {
                    ctx.gnb_props[0].push(Value::Float(tx));
                }
                if let Some(n) = cm.connected_ues {
                    ctx.gnb_props[1].push(Value::Int(n));
                }
                for r in ues {
                    self.ingest_ue(cell, r.ue, &r.metrics, report.emitted_at);
                }
            }
        }
    }

    fn ingest_ue(&mut self, cell: u32, ue: u32, m: &UeMetrics, at: SimTime) {
        match self.ues.get(&ue) {
            None => self.attach(ue, cell, m.rnti.unwrap_or(ue as i64 % 1000)),
            Some(b) if b.cell != cell => {
                // the report proves the UE moved; no insert told us
                self.stats.implicit_moves += 1;
                let (from, rnti) = (b.cell, b.rnti);
                let _ = self.handle_handover(ue, rnti, from, cell, at);
            }
            Some(_) => {}
        }
        let book = self.ues.get_mut(&ue).expect("attached above");
        if let Some(r) = m.rnti {
            book.rnti = r;
        }
        let multi_slot = book.multi_slot;
        let ctx = self.cells.get_mut(&cell).expect("known cell");
        let twin = ctx.ues.get_mut(&ue).expect("bookkeeping and cell agree");
        for (i, metric) in UE_METRICS.iter().enumerate() {
            if let Some(v) = ue_sample(m, *metric) {
                twin.props[i].push(v);
                self.stats.samples += 1;
            }
        }
        if let Some(k) = multi_slot {
            if let Some(loc) = m.location {
                ctx.multi_props[k][0].push(Value::Point(loc));
            }
            if let Some(r) = m.rsrp {
                ctx.multi_props[k][1].push(Value::Int(r));
            }
        }
    }

    fn detach(&mut self, ue: u32) {
        let Some(book) = self.ues.get_mut(&ue) else { return };
        let from = book.cell;
        book.cell = 0;
        let slot = book.multi_slot.take();
        if let Some(ctx) = self.cells.get_mut(&from) {
            if let Some(t) = ctx.ues.remove(&ue) {
                if let Some(j) = t.slot {
                    ctx.owners[j] = None;
                }
            }
            if let Some(k) = slot {
                ctx.multi_slots[k] = None;
                ctx.multi_props[k].iter_mut().for_each(|w| {
                    w.reset();
                    w.clear = true;
                });
            }
        }
        self.pending.insert(ue);
    }

    /// Moves a UE between cells. Bookkeeping changes now; the twin-graph
    /// mutations run on the following ticks (create at the target, then
    /// relationship swap, then removal at the source) and the multi-instance
    /// slot moves with the next multi dispatch of both cell twins.
    pub fn handle_handover(&mut self, ue: u32, rnti: i64, source: u32, target: u32, at: SimTime) -> Result<usize, XappError> {
        if !self.cells.contains_key(&target) {
            return Err(XappError::UnknownCell(target));
        }
        let mut transcript = HandoverTranscript { ue, source, target, started_at: at, completed_at: None, steps: Vec::new(), retries: 0 };
        let from = match self.ues.get(&ue) {
            None => {
                self.attach(ue, target, rnti);
                None
            }
            Some(b) if b.cell == target => None,
            Some(b) => Some(b.cell),
        };
        let Some(from) = from else {
            transcript.completed_at = Some(at);
            self.transcripts.push(transcript);
            return Ok(self.transcripts.len() - 1);
        };
        self.stats.handovers += 1;
        let generation = self.generation();
        let book = self.ues.get_mut(&ue).expect("known UE");
        let old_multi = book.multi_slot.take();

        let src = self.cells.get_mut(&from).expect("known cell");
        if let Some(j) = src.ues.remove(&ue).and_then(|t| t.slot) {
            src.owners[j] = None;
        }
        let mut seed = [None, None];
        if let Some(k) = old_multi {
            seed = [src.multi_props[k][0].current(), src.multi_props[k][1].current()];
            src.multi_slots[k] = None;
            for w in &mut src.multi_props[k] {
                w.reset();
                w.clear = true;
            }
            transcript.steps.push(TranscriptStep { at, action: MigrationAction::ClearMultiSlot { cell: from, slot: k } });
        }

        let dst = self.cells.get_mut(&target).expect("known cell");
        let slot = dst.free_slot();
        match slot {
            Some(j) => dst.owners[j] = Some(Owner::Ue(ue)),
            None => self.stats.slot_exhausted += 1,
        }
        dst.ues.insert(ue, UeTwin { generation, slot, props: Default::default() });
        let new_multi = dst.free_multi_slot();
        if let Some(k) = new_multi {
            dst.multi_slots[k] = Some(ue);
            let w = &mut dst.multi_props[k];
            w[0].reset();
            w[1].reset();
            w[0].clear = false;
            w[1].clear = false;
            for (i, v) in seed.into_iter().enumerate() {
                if let Some(v) = v {
                    w[i].push(v);
                }
            }
            transcript.steps.push(TranscriptStep { at, action: MigrationAction::SetMultiSlot { cell: target, slot: k } });
        }
        book.cell = target;
        book.rnti = rnti;
        book.multi_slot = new_multi;
        self.transcripts.push(transcript);
        let idx = self.transcripts.len() - 1;
        book.transcript = Some(idx);
        self.pending.insert(ue);
        Ok(idx)
    }

    /// Runs every dispatch slot that fell due in `(previous tick, now]`, at
    /// its scheduled time, then the pending twin-graph work at `now`.
    pub fn tick(&mut self, engine: &mut Engine, now: SimTime) -> Result<usize, XappError> {
        let mut sent = 0;
        let cell_ids: Vec<u32> = self.cells.keys().copied().collect();
        let mut due: Vec<(SimTime, usize)> = Vec::new();
        for &c in &cell_ids {
            due.clear();
            let ctx = self.cells.get_mut(&c).expect("listed");
            for j in 0..ctx.due.len() {
                if ctx.due[j] > now {
                    continue;
                }
                let mut d = ctx.due[j];
                while ctx.due[j] <= now {
                    d = ctx.due[j];
                    ctx.due[j] = ctx.due[j] + self.cell_period;
                }
                if ctx.owners[j].is_some() {
                    due.push((d, j));
                }
            }
            due.sort_unstable();
            for &(d, j) in &due {
                sent += self.dispatch_cell_slot(engine, c, d, j)?;
            }
        }

        let mut multi_due: Vec<(SimTime, u32)> = Vec::new();
        for &c in &cell_ids {
            let ctx = self.cells.get_mut(&c).expect("listed");
            if ctx.multi_due > now {
                continue;
            }
            let mut d = ctx.multi_due;
            while ctx.multi_due <= now {
                d = ctx.multi_due;
                ctx.multi_due = ctx.multi_due + self.multi_period;
            }
            multi_due.push((d, c));
        }
        multi_due.sort_unstable();
        for (d, c) in multi_due {
            sent += self.dispatch_multi(engine, c, d)?;
        }

        self.link_neighbors(engine, now)?;
        let pending: Vec<u32> = self.pending.iter().copied().collect();
        for ue in pending {
            self.reconcile(engine, ue, now)?;
        }
        Ok(sent)
    }

    fn dispatch_cell_slot(&mut self, engine: &mut Engine, c: u32, d: SimTime, j: usize) -> Result<usize, XappError> {
        let ctx = self.cells.get_mut(&c).expect("known cell");
        let inst = engine.instance_mut(ctx.instance)?;
        let owner = ctx.owners[j].expect("owned slot");
        let (twin, generation, props, paths, metrics): SlotView<'_> = match owner {
            Owner::Gnb => (ctx.gnb.clone(), 0, &mut ctx.gnb_props, &self.gnb_paths, &GNB_METRICS),
            Owner::Ue(u) => {
                let t = ctx.ues.get_mut(&u).expect("slot owner is attached");
                (ue_twin_arc(u), t.generation, &mut t.props, &self.ue_paths, &UE_METRICS)
            }
        };
        if !inst.is_visible(&twin, d) {
            self.stats.skipped_invisible += 1;
            return Ok(0);
        }
        self.stats.slots_evaluated += 1;
        let changed: Vec<(usize, Option<Value>)> = props
            .iter()
            .enumerate()
            .filter_map(|(i, w)| w.changed(aggregation(metrics[i])).map(|v| (i, v)))
            .collect();
        let entries: Vec<PatchEntry> =
            changed.iter().map(|(i, v)| PatchEntry { path: paths[*i].clone(), source_time: d, value: *v }).collect();
        let outcome = if entries.is_empty() { Ok(0) } else { send(inst, d, &twin, entries, &mut self.stats) };
        match outcome {
            Ok(calls) => {
                for (i, v) in &changed {
                    props[*i].last = *v;
                }
                props.iter_mut().for_each(PropWindow::reset);
                if self.config.record_dispatches {
                    self.dispatches.push(DispatchRecord {
                        at: d,
                        cell: c,
                        cell_instance: true,
                        twin,
                        generation,
                        entries: changed.iter().map(|(i, v)| (paths[*i].clone(), *v)).collect(),
                    });
                }
                Ok(calls)
            }
            Err(e) => {
                self.note_dispatch_error(&e);
                Ok(0)
            }
        }
    }

    fn dispatch_multi(&mut self, engine: &mut Engine, c: u32, d: SimTime) -> Result<usize, XappError> {
        let multi = self.multi.expect("multi exists once a cell does");
        let ctx = self.cells.get_mut(&c).expect("known cell");
        let inst = engine.instance_mut(multi)?;
        if !inst.is_visible(&ctx.multi_twin, d) {
            self.stats.skipped_invisible += 1;
            return Ok(0);
        }
        self.stats.slots_evaluated += 1;
        let mut changed: Vec<(usize, usize, Option<Value>)> = Vec::new();
        for (k, w) in ctx.multi_props.iter().enumerate() {
            for (i, p) in w.iter().enumerate() {
                if let Some(v) = p.changed(Aggregation::Latest) {
                    changed.push((k, i, v));
                }
            }
        }
        let entries: Vec<PatchEntry> = changed
            .iter()
            .map(|&(k, i, v)| PatchEntry { path: self.multi_paths[k][i].clone(), source_time: d, value: v })
            .collect();
        let twin = ctx.multi_twin.clone();
        let outcome = if entries.is_empty() { Ok(0) } else { send(inst, d, &twin, entries, &mut self.stats) };
        match outcome {
            Ok(calls) => {
                for &(k, i, v) in &changed {
                    ctx.multi_props[k][i].last = v;
                }
                ctx.multi_props.iter_mut().flatten().for_each(PropWindow::reset);
                if self.config.record_dispatches {
                    self.dispatches.push(DispatchRecord {
                        at: d,
                        cell: c,
                        cell_instance: false,
                        twin,
                        generation: 0,
                        entries: changed.iter().map(|&(k, i, v)| (self.multi_paths[k][i].clone(), v)).collect(),
                    });
                }
                Ok(calls)
            }
            Err(e) => {
                self.note_dispatch_error(&e);
                Ok(0)
            }
        }
    }

    fn note_dispatch_error(&mut self, e: &EngineError) {
        match e {
            EngineError::RateLimitExceeded(_) => self.stats.rate_deferrals += 1,
            _ => self.stats.dispatch_errors += 1,
        }
    }

    fn link_neighbors(&mut self, engine: &mut Engine, now: SimTime) -> Result<(), XappError> {
        if self.pending_edges.is_empty() {
            return Ok(());
        }
        let multi = engine.instance_mut(self.multi.expect("cells exist"))?;
        let todo: Vec<(u32, u32)> = self.pending_edges.iter().copied().collect();
        for (a, b) in todo {
            let (ca, cb) = (&self.cells[&a], &self.cells[&b]);
            if !multi.is_visible(&ca.multi_twin, now) || !multi.is_visible(&cb.multi_twin, now) {
                continue;
            }
            let d = ((ca.setup.position[0] - cb.setup.position[0]).powi(2) + (ca.setup.position[1] - cb.setup.position[1]).powi(2)).sqrt();
            let power = cb.setup.tx_power_dbm - pathloss_db(d);
            match multi.create_relationship(now, &neighbor_id(a, b), &ca.multi_twin, &cb.multi_twin, "neighbor", &[("receivedPower", Value::Float(power))]) {
                Ok(_) | Err(EngineError::DuplicateRelationship(_)) => {
                    self.pending_edges.remove(&(a, b));
                    self.edges.insert((a, b));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Drives one UE's twins toward "one twin and one relationship, both at
    /// the serving cell". Failed calls are retried on the next tick.
    fn reconcile(&mut self, engine: &mut Engine, ue: u32, now: SimTime) -> Result<(), XappError> {
        let book = self.ues.get(&ue).expect("pending UE is known");
        let (target, rnti) = (book.cell, book.rnti);
        let twin = ue_twin_id(ue);
        let mut steps = Vec::new();
        let mut failures = 0u32;

        let mut twins = book.twins.clone();
        let mut rels = book.rels.clone();
        if target != 0 {
            let ctx = &self.cells[&target];
            let inst = engine.instance_mut(ctx.instance)?;
            if !twins.contains(&target) {
                match inst.create_twin(now, &twin, CELL_UE_MODEL, &[]) {
                    Ok(_) | Err(EngineError::DuplicateTwin(_)) => {
                        twins.insert(target);
                        steps.push(MigrationAction::CreateTwin { cell: target });
                    }
                    Err(_) => failures += 1,
                }
            }
            if twins.contains(&target) && !rels.contains(&target) && inst.is_visible(&twin, now) {
                let payload = [("RNTI", Value::Int(rnti))];
                match inst.create_relationship(now, &serves_id(target, ue), &ctx.gnb, &twin, "serves", &payload) {
                    Ok(_) | Err(EngineError::DuplicateRelationship(_)) => {
                        rels.insert(target);
                        steps.push(MigrationAction::CreateRelationship { cell: target });
                    }
                    Err(_) => failures += 1,
                }
            }
        }
        // old copies go only once the new one is fully linked
        if target == 0 || rels.contains(&target) {
            let stale: Vec<u32> = twins.union(&rels).copied().filter(|&c| c != target).collect();
            for c in stale {
                let inst = engine.instance_mut(self.cells[&c].instance)?;
                if rels.contains(&c) {
                    match inst.delete_relationship(now, &serves_id(c, ue)) {
                        Ok(_) | Err(EngineError::UnknownRelationship(_)) => {
                            rels.remove(&c);
                            steps.push(MigrationAction::DeleteRelationship { cell: c });
                        }
                        Err(_) => failures += 1,
                    }
                }
                if !rels.contains(&c) && twins.contains(&c) {
                    match inst.delete_twin(now, &twin) {
                        Ok(_) => {
                            twins.remove(&c);
                            steps.push(MigrationAction::DeleteTwin { cell: c });
                        }
                        Err(EngineError::UnknownTwin(_)) if !inst.has_twin(&twin) => {
                            twins.remove(&c);
                        }
                        Err(_) => failures += 1,
                    }
                }
            }
        }

        let done = if target == 0 { twins.is_empty() && rels.is_empty() } else { twins.len() == 1 && rels.len() == 1 && rels.contains(&target) };
        self.stats.migration_retries += failures as u64;
        let book = self.ues.get_mut(&ue).expect("known");
        book.twins = twins;
        book.rels = rels;
        if let Some(t) = book.transcript {
            let tr = &mut self.transcripts[t];
            tr.steps.extend(steps.into_iter().map(|action| TranscriptStep { at: now, action }));
            tr.retries += failures;
            if done {
                tr.completed_at = Some(now);
            }
        }
        if done {
            let t = book.transcript.take();
            if target == 0 {
                self.ues.remove(&ue);
            }
            self.pending.remove(&ue);
            if let Some(t) = t {
                self.stats.migrations_completed += 1;
                self.log_transcript(t)?;
            }
        }
        Ok(())
    }

    fn log_transcript(&self, idx: usize) -> Result<(), XappError> {
        let Some(path) = &self.config.transcript_path else { return Ok(()) };
        let line = serde_json::to_string(&self.transcripts[idx]).map_err(|e| XappError::Io(e.to_string()))?;
        let mut f = OpenOptions::new().append(true).create(true).open(path).map_err(|e| XappError::Io(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| XappError::Io(e.to_string()))
    }
}

fn ue_twin_arc(ue: u32) -> Arc<str> {
    ue_twin_id(ue).into()
}

/// Sends a patch, halving it by property order while it is too large.
fn send(inst: &mut Instance, at: SimTime, twin: &str, entries: Vec<PatchEntry>, stats: &mut BridgeStats) -> Result<usize, EngineError> {
    let limit = inst.config().limits.max_patch_bytes;
    if entries.len() > 1 && entries.len() > 64 && canonical_size(&entries) > limit {
        stats.patches_split += 1;
        let mut first = entries;
        let second = first.split_off(first.len() / 2);
        let a = send(inst, at, twin, first, stats)?;
        return Ok(a + send(inst, at, twin, second, stats)?);
    }
    inst.update_twin(at, twin, &entries)?;
    stats.patches_sent += 1;
    stats.entries_sent += entries.len() as u64;
    Ok(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_rule() {
        assert_eq!(plan_capacity(0.1).unwrap().max_twins, 100);
        assert_eq!(plan_capacity(1.0).unwrap().max_twins, 1000);
        assert_eq!(plan_capacity(0.29).unwrap().max_twins, 290);
        assert_eq!(plan_capacity(0.05), Err(XappError::BelowServiceLimit(0.05)));
        assert!(plan_capacity(f64::NAN).is_err());
    }

    #[test]
    fn window_semantics() {
        let mut w = PropWindow::default();
        for _ in 0..10 {
            w.push(Value::Int(7));
        }
        assert_eq!(w.changed(Aggregation::IntMean), Some(Some(Value::Int(7))));
        w.last = Some(Value::Int(7));
        w.reset();
        w.push(Value::Int(6));
        w.push(Value::Int(8));
        assert_eq!(w.changed(Aggregation::IntMean), None);
        w.push(Value::Int(9));
        assert_eq!(w.changed(Aggregation::IntMean), Some(Some(Value::Int(8))));
        assert_eq!(int_mean(15, 2), 8);
        assert_eq!(int_mean(14, 4), 4);
    }

    #[test]
    fn schedule_is_strictly_after() {
        let p = Duration::from_millis(100);
        assert_eq!(first_due(SimTime::ZERO, p, Duration::ZERO), SimTime::from_millis(100));
        assert_eq!(first_due(SimTime::from_millis(100), p, Duration::from_millis(3)), SimTime::from_millis(103));
        assert_eq!(first_due(SimTime::from_millis(103), p, Duration::from_millis(3)), SimTime::from_millis(203));
    }
}

//! Event routing: per-property change events flow from instances through
//! filtered routes to a persistent sink or to another twin.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costing::UsageMeter;
use crate::engine::{Engine, EngineError, EventRecord, EventSubject, InstanceHandle, PatchEntry, TwinKey};
use crate::latency::{LatencyKind, LatencyModel, LatencySampler};
use crate::time::{millis, SimTime};
use crate::value::Value;

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("unknown sink {0}")]
    UnknownSink(usize),
    #[error("invalid sink: {0}")]
    InvalidSink(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Event predicate. An empty filter matches every property event.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Filter {
    /// Exact twin ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twins: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twin_prefix: Option<String>,
    /// Exact property paths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub properties: Option<BTreeSet<String>>,
}

impl Filter {
    pub fn all() -> Self {
        Filter::default()
    }

    pub fn property(path: &str) -> Self {
        Filter { properties: Some([path.to_string()].into()), ..Filter::default() }
    }

    pub fn twin_property(twin: &str, path: &str) -> Self {
        Filter { twins: Some([twin.to_string()].into()), ..Filter::property(path) }
    }

    pub fn is_all(&self) -> bool {
        self.twins.is_none() && self.twin_prefix.is_none() && self.properties.is_none()
    }

    fn validate(&self) -> Result<(), RouteError> {
        if self.twins.as_ref().is_some_and(|s| s.is_empty() || s.iter().any(String::is_empty)) {
            return Err(RouteError::InvalidFilter("empty twin set or twin id".into()));
        }
        if self.properties.as_ref().is_some_and(|s| s.is_empty() || s.iter().any(String::is_empty)) {
            return Err(RouteError::InvalidFilter("empty property set or path".into()));
        }
        if self.twin_prefix.as_deref() == Some("") {
            return Err(RouteError::InvalidFilter("empty twin prefix".into()));
        }
        Ok(())
    }

    pub fn matches(&self, twin: &str, path: &str) -> bool {
        self.twins.as_ref().is_none_or(|s| s.contains(twin))
            && self.twin_prefix.as_ref().is_none_or(|p| twin.starts_with(p.as_str()))
            && self.properties.as_ref().is_none_or(|s| s.contains(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SinkId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RouteId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Sink(SinkId),
    TwinRoute {
        instance: String,
        twin: String,
        /// Source path → target path; unmapped paths keep their name.
        #[serde(default)]
        path_map: BTreeMap<String, String>,
    },
}

/// Batch ingestion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkConfig {
    /// Batch ingestion period.
    pub window_s: f64,
    /// Deduplication bucket: within each bucket only the latest value per
    /// (instance, twin, property) is kept. Equal to `window_s` for plain
    /// per-window dedup; smaller buckets keep more rows.
    pub bucket_s: f64,
    /// Metered bytes per stored row.
    pub row_bytes: u64,
    /// Append-only JSONL file; a CSV mirror is written next to it.
    pub path: Option<PathBuf>,
}

impl Default for SinkConfig {
    fn default() -> Self {
        SinkConfig { window_s: 300.0, bucket_s: 300.0, row_bytes: 21, path: None }
    }
}

impl SinkConfig {
    fn validate(&self) -> Result<(), RouteError> {
        let ok = self.window_s > 0.0
            && self.bucket_s > 0.0
            && self.bucket_s <= self.window_s
            && (self.window_s / self.bucket_s - (self.window_s / self.bucket_s).round()).abs() < 1e-9;
        if !ok {
            return Err(RouteError::InvalidSink("window must be a positive multiple of the bucket".into()));
        }
        Ok(())
    }
}

/// One stored row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkRow {
    /// Ingestion time of the kept value (lastUpdatedTime), Unix µs.
    pub ts: u64,
    pub instance: Arc<str>,
    pub twin: Arc<str>,
    pub path: Arc<str>,
    pub value: Option<Value>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SinkStats {
    pub events_in: u64,
    pub rows: u64,
    pub windows: u64,
    pub bytes: u64,
    pub dropped_while_paused: u64,
}

#[derive(Debug)]
struct Sink {
    config: SinkConfig,
    window: Duration,
    /// Buckets per window; bucket edges are placed exactly inside each window.
    buckets: u64,
    /// Rows of windows not yet ingested, keyed by window index.
    open: BTreeMap<u64, Vec<SinkRow>>,
    /// `[instance][twin][slot] → (bucket index + 1, row position)`.
    index: Vec<Vec<Vec<(u64, u32)>>>,
    jsonl: Option<BufWriter<File>>,
    csv: Option<BufWriter<File>>,
    paused: Option<String>,
    stats: SinkStats,
}

impl Sink {
    fn open(config: SinkConfig) -> Result<Self, RouteError> {
        config.validate()?;
        let (jsonl, csv) = match &config.path {
            Some(p) => {
                let mut csv = BufWriter::new(File::create(p.with_extension("csv"))?);
                writeln!(csv, "ts,instance,twin,path,value")?;
                (Some(BufWriter::new(File::create(p)?)), Some(csv))
            }
            None => (None, None),
        };
        Ok(Sink {
            window: Duration::from_secs_f64(config.window_s),
            buckets: (config.window_s / config.bucket_s).round() as u64,
            config,
            open: BTreeMap::new(),
            index: Vec::new(),
            jsonl,
            csv,
            paused: None,
            stats: SinkStats::default(),
        })
    }

    fn slot_entry(&mut self, inst: InstanceHandle, twin: TwinKey, slot: u32) -> &mut (u64, u32) {
        let (i, t, s) = (inst.index(), twin.0 as usize, slot as usize);
        if self.index.len() <= i {
            self.index.resize_with(i + 1, Vec::new);
        }
        let twins = &mut self.index[i];
        if twins.len() <= t {
            twins.resize_with(t + 1, Vec::new);
        }
        let slots = &mut twins[t];
        if slots.len() <= s {
            slots.resize(s + 1, (0, 0));
        }
        &mut slots[s]
    }

    fn ingest(&mut self, engine: &Engine, e: &EventRecord, twin: TwinKey, slot: u32) {
        self.stats.events_in += 1;
        if self.paused.is_some() {
            self.stats.dropped_while_paused += 1;
            return;
        }
        let t = e.last_updated.as_micros();
        let wl = self.window.as_micros() as u64;
        let window = t / wl;
        let bucket = window * self.buckets + (t % wl) * self.buckets / wl;
        let entry = *self.slot_entry(e.instance, twin, slot);
        if entry.0 == bucket + 1 {
            let row = &mut self.open.get_mut(&window).expect("window of a live bucket")[entry.1 as usize];
            if e.last_updated.to_unix_micros() >= row.ts {
                row.ts = e.last_updated.to_unix_micros();
                row.value = e.new;
            }
            return;
        }
        let Ok(inst) = engine.instance(e.instance) else { return };
        let path = inst.event_path(e).expect("property event").clone();
        let rows = self.open.entry(window).or_default();
        rows.push(SinkRow {
            ts: e.last_updated.to_unix_micros(),
            instance: inst.id_arc().clone(),
            twin: inst.twin_id_arc(twin).clone(),
            path,
            value: e.new,
        });
        let pos = rows.len() as u32 - 1;
        *self.slot_entry(e.instance, twin, slot) = (bucket + 1, pos);
    }

    /// Ingests every window that ends at or before `until`.
    fn flush(&mut self, until: Option<SimTime>, meter: &mut UsageMeter) {
        let wl = self.window.as_micros() as u64;
        while let Some((&w, _)) = self.open.first_key_value() {
            if until.is_some_and(|u| (w + 1) * wl > u.as_micros()) {
                break;
            }
            let rows = self.open.remove(&w).expect("present");
            self.stats.windows += 1;
            self.stats.rows += rows.len() as u64;
            let bytes = rows.len() as u64 * self.config.row_bytes;
            self.stats.bytes += bytes;
            meter.ingest_bytes += bytes;
            if let Err(err) = self.write(&rows) {
                self.paused = Some(err.to_string());
            }
        }
    }

    fn write(&mut self, rows: &[SinkRow]) -> io::Result<()> {
        if let Some(w) = self.jsonl.as_mut() {
            for r in rows {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        if let Some(w) = self.csv.as_mut() {
            for r in rows {
                let v = match &r.value {
                    None => String::new(),
                    Some(Value::Point(p)) => format!("\"{} {}\"", p.lat, p.lon),
                    Some(v) => v.to_string(),
                };
                writeln!(w, "{},{},{},{},{}", r.ts, csv_field(&r.instance), csv_field(&r.twin), csv_field(&r.path), v)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Entry of a route's dead-letter log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub at: u64,
    pub route: usize,
    pub source_twin: String,
    pub target_twin: String,
    pub path: String,
    pub error: String,
}

/// Per-route conservation counters:
/// `matched + filtered_out = emitted`, `delivered + dead_lettered + in_flight = matched`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RouteStats {
    pub emitted: u64,
    pub filtered_out: u64,
    pub matched: u64,
    pub delivered: u64,
    pub dead_lettered: u64,
    pub in_flight: u64,
}

#[derive(Debug)]
struct Route {
    source: InstanceHandle,
    filter: Filter,
    endpoint: Endpoint,
    target: Option<InstanceHandle>,
    cache: HashMap<(u32, u32), bool>,
    last_delivery: HashMap<TwinKey, SimTime>,
    dead: Vec<DeadLetter>,
    dead_file: Option<BufWriter<File>>,
    stats: RouteStats,
    /// End-to-end lag (target lastUpdatedTime − original sourceTime) per
    /// forwarded event, ms.
    e2e_ms: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Forward {
    route: usize,
    source_twin_id: Arc<str>,
    path: Arc<str>,
    value: Option<Value>,
    source_time: SimTime,
}

/// Declarative route, as stored under `routes/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteConfig {
    pub source: String,
    #[serde(default)]
    pub filter: Filter,
    pub endpoint: Endpoint,
}

impl RouteConfig {
    pub fn load(path: &Path) -> Result<Self, RouteError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FabricConfig {
    pub seed: u64,
    pub throughput_units: u32,
    pub data_explorer: bool,
    /// Directory for per-route dead-letter JSONL files.
    pub dead_letter_dir: Option<PathBuf>,
}

/// The event hub.
#[derive(Debug)]
pub struct EventFabric {
    config: FabricConfig,
    routes: Vec<Route>,
    by_source: HashMap<InstanceHandle, Vec<usize>>,
    sinks: Vec<Sink>,
    hop: LatencySampler,
    queue: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: HashMap<u64, Forward>,
    next_seq: u64,
    meter: UsageMeter,
}

impl EventFabric {
    pub fn new(config: FabricConfig, latency: LatencyModel) -> Self {
        let meter = UsageMeter {
            throughput_units: config.throughput_units,
            data_explorer: config.data_explorer,
            ..UsageMeter::default()
        };
        EventFabric {
            hop: LatencySampler::new(latency, config.seed, 1),
            config,
            routes: Vec::new(),
            by_source: HashMap::new(),
            sinks: Vec::new(),
            queue: BinaryHeap::new(),
            pending: HashMap::new(),
            next_seq: 0,
            meter,
        }
    }

    pub fn meter(&self) -> &UsageMeter {
        &self.meter
    }

    pub fn add_sink(&mut self, config: SinkConfig) -> Result<SinkId, RouteError> {
        self.sinks.push(Sink::open(config)?);
        Ok(SinkId(self.sinks.len() - 1))
    }

    pub fn sink_stats(&self, id: SinkId) -> Option<SinkStats> {
        self.sinks.get(id.0).map(|s| s.stats)
    }

    /// Why a sink stopped accepting rows, if it did.
    pub fn sink_alarm(&self, id: SinkId) -> Option<&str> {
        self.sinks.get(id.0).and_then(|s| s.paused.as_deref())
    }

    pub fn create_route(&mut self, engine: &Engine, source: &str, filter: Filter, endpoint: Endpoint) -> Result<RouteId, RouteError> {
        let src = engine.handle(source).ok_or_else(|| RouteError::UnknownInstance(source.to_string()))?;
        filter.validate()?;
        let target = match &endpoint {
            Endpoint::Sink(id) => {
                if id.0 >= self.sinks.len() {
                    return Err(RouteError::UnknownSink(id.0));
                }
                None
            }
            Endpoint::TwinRoute { instance, twin, .. } => {
                if twin.is_empty() {
                    return Err(RouteError::InvalidFilter("empty target twin".into()));
                }
                Some(engine.handle(instance).ok_or_else(|| RouteError::UnknownInstance(instance.clone()))?)
            }
        };
        let idx = self.routes.len();
        let dead_file = match &self.config.dead_letter_dir {
            Some(dir) if target.is_some() => {
                std::fs::create_dir_all(dir)?;
                Some(BufWriter::new(File::create(dir.join(format!("route-{idx}.dead.jsonl")))?))
            }
            _ => None,
        };
        self.routes.push(Route {
            source: src,
            filter,
            endpoint,
            target,
            cache: HashMap::new(),
            last_delivery: HashMap::new(),
            dead: Vec::new(),
            dead_file,
            stats: RouteStats::default(),
            e2e_ms: Vec::new(),
        });
        self.by_source.entry(src).or_default().push(idx);
        Ok(RouteId(idx))
    }

    pub fn create_route_from(&mut self, engine: &Engine, config: RouteConfig) -> Result<RouteId, RouteError> {
        self.create_route(engine, &config.source, config.filter, config.endpoint)
    }

    pub fn route_stats(&self, id: RouteId) -> RouteStats {
        self.routes[id.0].stats
    }

    pub fn route_source(&self, id: RouteId) -> InstanceHandle {
        self.routes[id.0].source
    }

    pub fn dead_letters(&self, id: RouteId) -> &[DeadLetter] {
        &self.routes[id.0].dead
    }

    pub fn end_to_end_ms(&self, id: RouteId) -> &[f64] {
        &self.routes[id.0].e2e_ms
    }

    /// Takes newly emitted events from every routed instance and publishes
    /// them. Instances without routes keep their events.
    pub fn collect(&mut self, engine: &mut Engine, scratch: &mut Vec<EventRecord>) {
        let mut sources: Vec<InstanceHandle> = self.by_source.keys().copied().collect();
        sources.sort();
        for h in sources {
            scratch.clear();
            if let Ok(inst) = engine.instance_mut(h) {
                inst.drain_events_into(scratch);
            }
            self.publish(engine, scratch);
        }
    }

    /// Routes a batch of events (all from one instance, in emission order).
    pub fn publish(&mut self, engine: &Engine, events: &[EventRecord]) {
        let Some(first) = events.first() else { return };
        let Some(route_ids) = self.by_source.get(&first.instance).cloned() else { return };
        let Ok(inst) = engine.instance(first.instance) else { return };
        for e in events {
            let EventSubject::Property { twin, slot } = e.subject else {
                for &r in &route_ids {
                    let rs = &mut self.routes[r].stats;
                    rs.emitted += 1;
                    rs.filtered_out += 1;
                }
                continue;
            };
            self.meter.event_hub_messages += 1;
            for &r in &route_ids {
                let route = &mut self.routes[r];
                route.stats.emitted += 1;
                let hit = if route.filter.is_all() {
                    true
                } else {
                    *route.cache.entry((twin.0, slot)).or_insert_with(|| {
                        route.filter.matches(inst.twin_id(twin), inst.event_path(e).expect("property event"))
                    })
                };
                if !hit {
                    route.stats.filtered_out += 1;
                    continue;
                }
                route.stats.matched += 1;
                match &route.endpoint {
                    Endpoint::Sink(id) => {
                        route.stats.delivered += 1;
                        let sink = id.0;
                        self.sinks[sink].ingest(engine, e, twin, slot);
                    }
                    Endpoint::TwinRoute { path_map, .. } => {
                        let src_path = inst.event_path(e).expect("property event");
                        let path: Arc<str> = match path_map.get(&**src_path) {
                            Some(p) => p.as_str().into(),
                            None => src_path.clone(),
                        };
                        let hop = self.hop.sample(LatencyKind::Route, 0, 0);
                        let prev = route.last_delivery.get(&twin).copied().unwrap_or(SimTime::ZERO);
                        // per-twin FIFO: never overtake an earlier event of the same twin
                        let due = (e.last_updated + hop).max(prev);
                        route.last_delivery.insert(twin, due);
                        route.stats.in_flight += 1;
                        let seq = self.next_seq;
                        self.next_seq += 1;
                        self.pending.insert(
                            seq,
                            Forward {
                                route: r,
                                source_twin_id: inst.twin_id_arc(twin).clone(),
                                path,
                                value: e.new,
                                source_time: e.source_time.unwrap_or(e.last_updated),
                            },
                        );
                        self.queue.push(Reverse((due, seq)));
                    }
                }
            }
        }
    }

    /// Time of the earliest pending twin-route delivery.
    pub fn next_delivery(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    /// Delivers twin-route patches due at or before `now`, flushes sink
    /// windows that have closed, and returns the number of deliveries made.
    pub fn advance(&mut self, engine: &mut Engine, now: SimTime) -> usize {
        let mut n = 0;
        while let Some(&Reverse((due, seq))) = self.queue.peek() {
            if due > now {
                break;
            }
            self.queue.pop();
            let f = self.pending.remove(&seq).expect("queued forward");
            self.deliver(engine, due, f);
            n += 1;
        }
        // rows can still arrive up to the largest lag after a window closes
        let grace = Duration::from_millis(250);
        let closed = now.saturating_sub(grace);
        for s in &mut self.sinks {
            s.flush(Some(closed), &mut self.meter);
        }
        n
    }

    fn deliver(&mut self, engine: &mut Engine, at: SimTime, f: Forward) {
        let route = &mut self.routes[f.route];
        route.stats.in_flight -= 1;
        let Endpoint::TwinRoute { twin, .. } = &route.endpoint else { unreachable!("only twin routes queue") };
        let patch = [PatchEntry { path: f.path.clone(), source_time: f.source_time, value: f.value }];
        let result = match route.target.map(|h| engine.instance_mut(h)) {
            Some(Ok(inst)) => inst.update_twin(at, twin, &patch).map(|r| (r, inst.property(twin, &f.path).map(|p| p.last_updated))),
            Some(Err(e)) => Err(e),
            None => Err(EngineError::UnknownInstance(String::new())),
        };
        match result {
            Ok((receipt, last)) => {
                route.stats.delivered += 1;
                let landed = last.unwrap_or(at + receipt.lag);
                route.e2e_ms.push(millis(landed.since(f.source_time)));
            }
            Err(err) => {
                route.stats.dead_lettered += 1;
                let letter = DeadLetter {
                    at: at.to_unix_micros(),
                    route: f.route,
                    source_twin: f.source_twin_id.to_string(),
                    target_twin: twin.clone(),
                    path: f.path.to_string(),
                    error: err.to_string(),
                };
                if let Some(w) = route.dead_file.as_mut() {
                    let _ = serde_json::to_writer(&mut *w, &letter).map_err(io::Error::from).and_then(|_| w.write_all(b"\n"));
                    let _ = w.flush();
                }
                route.dead.push(letter);
            }
        }
    }

    /// Delivers everything still queued and ingests every open window.
    pub fn finish(&mut self, engine: &mut Engine) {
        if let Some(last) = self.queue.iter().map(|Reverse((t, _))| *t).max() {
            self.advance(engine, last);
        }
        for s in &mut self.sinks {
            s.flush(None, &mut self.meter);
        }
    }
}

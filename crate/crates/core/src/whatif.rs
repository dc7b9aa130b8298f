//! What-if analysis: snapshot a live deployment, spawn copies of it, drive
//! the copies with other scenarios and diff the evolved graphs.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::wire::unix_micros;
use crate::engine::{ClockMode, Engine, EngineConfig, EngineError, EventRecord, EventSubject, InstanceHandle, PropertyValue, RelationshipState, TwinState};
use crate::model::ModelInterface;
use crate::par;
use crate::ran::{Network, RanError, ScenarioConfig};
use crate::scenario::{Deployment, ScenarioError};
use crate::time::SimTime;
use crate::value::Value;
use crate::xapp::{Bridge, BridgeStats, XappConfig, XappError};

#[derive(Debug, Error)]
pub enum WhatIfError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Xapp(#[from] XappError),
    #[error(transparent)]
    Ran(#[from] RanError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// How an instance is read when snapshotting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadMode {
    /// One query over the whole instance (query units).
    Query,
    /// One direct read per twin (operations).
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotTarget {
    pub role: String,
    pub handle: InstanceHandle,
    pub mode: ReadMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinImage {
    pub id: String,
    pub model: String,
    pub properties: BTreeMap<String, PropertyValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceImage {
    pub role: String,
    /// Model documents in upload order.
    pub models: Vec<String>,
    pub twins: Vec<TwinImage>,
    pub relationships: Vec<RelationshipState>,
}

/// Point-in-time copy of a set of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    #[serde(with = "unix_micros")]
    pub taken_at: SimTime,
    pub query_units: u64,
    pub operations: u64,
    pub instances: Vec<InstanceImage>,
}

impl Snapshot {
    pub fn to_json(&self) -> Result<String, WhatIfError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, WhatIfError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn twin_count(&self) -> usize {
        self.instances.iter().map(|i| i.twins.len()).sum()
    }

    pub fn relationship_count(&self) -> usize {
        self.instances.iter().map(|i| i.relationships.len()).sum()
    }
}

/// Instance id without the deployment prefix.
pub fn role_of<'a>(instance_id: &'a str, prefix: &str) -> &'a str {
    instance_id.strip_prefix(prefix).unwrap_or(instance_id)
}

/// The instances of a bridge: the multi instance is read twin by twin, each
/// cell instance with one query.
pub fn deployment_targets(engine: &Engine, bridge: &Bridge) -> Result<Vec<SnapshotTarget>, WhatIfError> {
    let prefix = &bridge.config().prefix;
    let mut out = Vec::new();
    for h in bridge.instances() {
        let inst = engine.instance(h)?;
        let mode = if Some(h) == bridge.multi_instance() { ReadMode::Direct } else { ReadMode::Query };
        out.push(SnapshotTarget { role: role_of(inst.id(), prefix).to_string(), handle: h, mode });
    }
    Ok(out)
}

/// Roles of a bridge's instances.
pub fn deployment_roles(engine: &Engine, bridge: &Bridge) -> Result<BTreeMap<String, InstanceHandle>, WhatIfError> {
    Ok(deployment_targets(engine, bridge)?.into_iter().map(|t| (t.role, t.handle)).collect())
}

/// Models ordered so every component interface precedes its users.
fn upload_order<'a>(models: impl Iterator<Item = &'a ModelInterface>) -> Vec<String> {
    let mut left: Vec<&ModelInterface> = models.collect();
    left.sort_by(|a, b| a.id.cmp(&b.id));
    let mut done: Vec<&str> = Vec::new();
    let mut docs = Vec::new();
    while !left.is_empty() {
        let before = left.len();
        let mut i = 0;
        while i < left.len() {
            if left[i].components.iter().all(|c| done.contains(&c.interface.as_str())) {
                let m = left.remove(i);
                done.push(&m.id);
                docs.push(m.to_json());
            } else {
                i += 1;
            }
        }
        if left.len() == before {
            // unresolvable leftovers keep their id order
            docs.extend(left.drain(..).map(|m| m.to_json()));
        }
    }
    docs
}

fn image_of(role: &str, models: Vec<String>, mut states: Vec<TwinState>) -> InstanceImage {
    states.sort_by(|a, b| a.id.cmp(&b.id));
    let mut relationships: Vec<RelationshipState> = states.iter_mut().flat_map(|t| std::mem::take(&mut t.relationships)).collect();
    relationships.sort_by(|a, b| a.id.cmp(&b.id));
    let twins = states.into_iter().map(|t| TwinImage { id: t.id, model: t.model, properties: t.properties }).collect();
    InstanceImage { role: role.to_string(), models, twins, relationships }
}

/// Reads every target at `at`. Images are sorted by role.
pub fn snapshot(engine: &mut Engine, targets: &[SnapshotTarget], at: SimTime) -> Result<Snapshot, WhatIfError> {
    let mut instances = Vec::with_capacity(targets.len());
    let (mut query_units, mut operations) = (0, 0);
    for t in targets {
        let inst = engine.instance_mut(t.handle)?;
        let models = upload_order(inst.models().interfaces().map(|m| &**m));
        let states = match t.mode {
            ReadMode::Query => {
                let r = inst.query_instance(at)?;
                query_units += r.query_units;
                r.value
            }
            ReadMode::Direct => {
                let ids: Vec<String> = inst.twin_ids().filter(|id| inst.is_visible(id, at)).map(str::to_string).collect();
                let mut states = Vec::with_capacity(ids.len());
                for id in ids {
                    states.push(inst.get_twin(at, &id)?.value);
                    operations += 1;
                }
                states
            }
        };
        instances.push(image_of(&t.role, models, states));
    }
    instances.sort_by(|a, b| a.role.cmp(&b.role));
    Ok(Snapshot { taken_at: at, query_units, operations, instances })
}

pub fn snapshot_deployment(engine: &mut Engine, bridge: &Bridge, at: SimTime) -> Result<Snapshot, WhatIfError> {
    let targets = deployment_targets(engine, bridge)?;
    snapshot(engine, &targets, at)
}

/// Function executions charged by a spawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionPlan {
    /// Trigger plus snapshot read.
    pub per_spawn: u64,
    /// Orchestration start, model upload and finalization of one copy.
    pub per_copy: u64,
    /// Twin batch and relationship batch of one instance copy.
    pub per_instance: u64,
}

impl Default for ExecutionPlan {
    fn default() -> Self {
        ExecutionPlan { per_spawn: 2, per_copy: 3, per_instance: 2 }
    }
}

impl ExecutionPlan {
    pub fn total(&self, copies: usize, instances: usize) -> u64 {
        self.per_spawn + copies as u64 * (self.per_copy + self.per_instance * instances as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpawnConfig {
    pub seed: u64,
    pub engine: EngineConfig,
    /// Log-normal start-up delay of each copy's orchestrator.
    pub cold_start_median_ms: f64,
    pub cold_start_sigma: f64,
    /// Time to upload one model document; zero leaves uploads out of the
    /// spawn time.
    pub model_upload_ms: f64,
    pub executions: ExecutionPlan,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        SpawnConfig {
            seed: 11,
            engine: EngineConfig::default(),
            cold_start_median_ms: 400.0,
            cold_start_sigma: 0.5,
            model_upload_ms: 20.0,
            executions: ExecutionPlan::default(),
        }
    }
}

/// A spawned copy living in its own engine.
#[derive(Debug)]
pub struct DeploymentCopy {
    pub index: usize,
    pub prefix: String,
    pub engine: Engine,
    pub roles: BTreeMap<String, InstanceHandle>,
    pub started_at: SimTime,
    pub ready_at: SimTime,
}

impl DeploymentCopy {
    pub fn spawn_time(&self) -> Duration {
        self.ready_at.since(self.started_at)
    }

    pub fn view(&self) -> Result<GraphView, WhatIfError> {
        GraphView::from_engine(&self.engine, &self.roles)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnFailure {
    pub copy: usize,
    pub error: String,
    pub instances_created: usize,
    pub instances_rolled_back: usize,
    /// Instances still present in the copy's engine afterwards.
    pub leftover_instances: usize,
}

#[derive(Debug)]
pub struct SpawnOutcome {
    pub copies: Vec<DeploymentCopy>,
    pub failures: Vec<SpawnFailure>,
    pub function_executions: u64,
    pub started_at: SimTime,
    /// When the last successful copy became ready.
    pub finished_at: SimTime,
}

impl SpawnOutcome {
    pub fn duration(&self) -> Duration {
        self.finished_at.since(self.started_at)
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn role_hash(role: &str) -> u64 {
    role.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Rebuilds one copy: per instance, upload models, bulk-create the twins,
/// wait until the last one is visible, then create the relationships paced
/// at the bulk rate.
fn spawn_one(snapshot: &Snapshot, index: usize, config: &SpawnConfig, at: SimTime) -> Result<DeploymentCopy, SpawnFailure> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, index as u64 + 1));
    let z: f64 = rng.sample(StandardNormal);
    let cold_ms = config.cold_start_median_ms * (config.cold_start_sigma * z).exp();
    let started = at + Duration::from_micros((cold_ms * 1e3).max(0.0).round() as u64);
    let prefix = format!("copy{index}-");
    let mut engine = Engine::new(config.engine.clone());
    let mut roles = BTreeMap::new();
    let spacing = config.engine.latency.create_spacing();

    let build = |engine: &mut Engine, roles: &mut BTreeMap<String, InstanceHandle>| -> Result<SimTime, EngineError> {
        let mut t = started;
        for image in &snapshot.instances {
            let seed = mix(config.seed, role_hash(&image.role));
            let h = engine.create_instance(&format!("{prefix}{}", image.role), ClockMode::Simulated, seed)?;
            roles.insert(image.role.clone(), h);
            let inst = engine.instance_mut(h)?;
            let docs: Vec<&str> = image.models.iter().map(String::as_str).collect();
            inst.upload_models(t, &docs)?;
            t = t + Duration::from_micros((config.model_upload_ms * 1e3 * docs.len() as f64).max(0.0).round() as u64);
            let mut visible = t;
            for twin in &image.twins {
                let initial: Vec<(&str, Value)> = twin.properties.iter().map(|(p, v)| (p.as_str(), v.value)).collect();
                let r = inst.create_twin(t, &twin.id, &twin.model, &initial)?;
                visible = visible.max(r.response_time);
            }
            let mut done = visible;
            let mut send = visible;
            for rel in &image.relationships {
                let payload: Vec<(&str, Value)> = rel.properties.iter().map(|(p, v)| (p.as_str(), v.value)).collect();
                let r = inst.create_relationship(send, &rel.id, &rel.source, &rel.target, &rel.name, &payload)?;
                done = done.max(r.response_time);
                send = send + spacing;
            }
            t = done.max(send);
        }
        Ok(t)
    };

    match build(&mut engine, &mut roles) {
        Ok(ready_at) => Ok(DeploymentCopy { index, prefix, engine, roles, started_at: at, ready_at }),
        Err(e) => {
            let created = roles.len();
            let mut rolled_back = 0;
            for h in roles.values() {
                if engine.delete_instance(*h).is_ok() {
                    rolled_back += 1;
                }
            }
            Err(SpawnFailure {
                copy: index,
                error: e.to_string(),
                instances_created: created,
                instances_rolled_back: rolled_back,
                leftover_instances: engine.instances().count(),
            })
        }
    }
}

/// Builds `n` independent copies of `snapshot`, in parallel, starting at
/// `at`. A copy that fails part-way is rolled back and reported; the others
/// are returned.
pub fn spawn_copies(snapshot: &Snapshot, n: usize, config: &SpawnConfig, at: SimTime) -> Result<SpawnOutcome, WhatIfError> {
    if n == 0 {
        return Err(WhatIfError::Invalid("at least one copy is needed".into()));
    }
    let results = par::map((0..n).collect(), |k| spawn_one(snapshot, k, config, at));
    let mut copies = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(c) => copies.push(c),
            Err(f) => failures.push(f),
        }
    }
    let finished_at = copies.iter().map(|c| c.ready_at).max().unwrap_or(at);
    Ok(SpawnOutcome {
        copies,
        failures,
        function_executions: config.executions.total(n, snapshot.instances.len()),
        started_at: at,
        finished_at,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TwinNode {
    pub model: String,
    pub properties: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeNode {
    pub source: String,
    pub target: String,
    pub name: String,
    pub properties: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InstanceGraph {
    pub twins: BTreeMap<String, TwinNode>,
    pub relationships: BTreeMap<String, EdgeNode>,
}

/// Values-only view of a set of instances, keyed by role.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphView {
    pub instances: BTreeMap<String, InstanceGraph>,
}

fn values(props: &BTreeMap<String, PropertyValue>) -> BTreeMap<String, Value> {
    props.iter().map(|(k, v)| (k.clone(), v.value)).collect()
}

fn edge(r: &RelationshipState) -> EdgeNode {
    EdgeNode { source: r.source.clone(), target: r.target.clone(), name: r.name.clone(), properties: values(&r.properties) }
}

impl GraphView {
    pub fn from_snapshot(s: &Snapshot) -> Self {
        let instances = s
            .instances
            .iter()
            .map(|i| {
                let twins = i.twins.iter().map(|t| (t.id.clone(), TwinNode { model: t.model.clone(), properties: values(&t.properties) })).collect();
                let relationships = i.relationships.iter().map(|r| (r.id.clone(), edge(r))).collect();
                (i.role.clone(), InstanceGraph { twins, relationships })
            })
            .collect();
        GraphView { instances }
    }

    /// Unmetered read of live state, visible or not.
    pub fn from_engine(engine: &Engine, roles: &BTreeMap<String, InstanceHandle>) -> Result<Self, WhatIfError> {
        let mut instances = BTreeMap::new();
        for (role, &h) in roles {
            let inst = engine.instance(h)?;
            let mut g = InstanceGraph::default();
            for id in inst.twin_ids() {
                let t = inst.twin_state(id).expect("listed twin is live");
                g.twins.insert(t.id, TwinNode { model: t.model, properties: values(&t.properties) });
            }
            for r in inst.relationships() {
                g.relationships.insert(r.id.clone(), edge(&r));
            }
            instances.insert(role.clone(), g);
        }
        Ok(GraphView { instances })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entity {
    Instance,
    Twin,
    Relationship,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    /// Present only in B.
    Added,
    /// Present only in A.
    Removed,
    Changed,
}

/// One difference. `path` is a property path, or `$model`, `$source`,
/// `$target`, `$name` for structural fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub role: String,
    pub entity: Entity,
    pub id: String,
    pub path: Option<String>,
    pub change: Change,
    pub a: Option<serde_json::Value>,
    pub b: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiffReport {
    pub entries: Vec<DiffEntry>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn to_json(&self) -> Result<String, WhatIfError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for DiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return writeln!(f, "no differences");
        }
        for e in &self.entries {
            let sign = match e.change {
                Change::Added => '+',
                Change::Removed => '-',
                Change::Changed => '~',
            };
            let kind = match e.entity {
                Entity::Instance => "instance",
                Entity::Twin => "twin",
                Entity::Relationship => "relationship",
            };
            let mut line = format!("{sign} {} {kind} {}", e.role, e.id);
            if let Some(p) = &e.path {
                let _ = write!(line, " {p}");
            }
            let show = |v: &Option<serde_json::Value>| v.as_ref().map_or("-".to_string(), |v| v.to_string());
            match e.change {
                Change::Changed => {
                    let _ = write!(line, ": {} -> {}", show(&e.a), show(&e.b));
                }
                Change::Added if e.path.is_some() => {
                    let _ = write!(line, ": {}", show(&e.b));
                }
                Change::Removed if e.path.is_some() => {
                    let _ = write!(line, ": {}", show(&e.a));
                }
                _ => {}
            }
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data serializes")
}

struct Differ<'a> {
    role: &'a str,
    out: Vec<DiffEntry>,
}

impl Differ<'_> {
    fn push(&mut self, entity: Entity, id: &str, path: Option<&str>, a: Option<serde_json::Value>, b: Option<serde_json::Value>) {
        let change = match (&a, &b) {
            (None, Some(_)) => Change::Added,
            (Some(_), None) => Change::Removed,
            _ => Change::Changed,
        };
        self.out.push(DiffEntry { role: self.role.to_string(), entity, id: id.to_string(), path: path.map(str::to_string), change, a, b });
    }

    fn props(&mut self, entity: Entity, id: &str, a: &BTreeMap<String, Value>, b: &BTreeMap<String, Value>) {
        for (path, va) in a {
            match b.get(path) {
                Some(vb) if vb == va => {}
                vb => self.push(entity, id, Some(path), Some(json(va)), vb.map(json)),
            }
        }
        for (path, vb) in b {
            if !a.contains_key(path) {
                self.push(entity, id, Some(path), None, Some(json(vb)));
            }
        }
    }

    fn field(&mut self, entity: Entity, id: &str, name: &str, a: &str, b: &str) {
        if a != b {
            self.push(entity, id, Some(name), Some(json(&a)), Some(json(&b)));
        }
    }

    fn instance(&mut self, a: &InstanceGraph, b: &InstanceGraph) {
        for (id, ta) in &a.twins {
            match b.twins.get(id) {
                None => self.push(Entity::Twin, id, None, Some(json(&ta.model)), None),
                Some(tb) => {
                    self.field(Entity::Twin, id, "$model", &ta.model, &tb.model);
                    self.props(Entity::Twin, id, &ta.properties, &tb.properties);
                }
            }
        }
        for (id, tb) in &b.twins {
            if !a.twins.contains_key(id) {
                self.push(Entity::Twin, id, None, None, Some(json(&tb.model)));
            }
        }
        for (id, ea) in &a.relationships {
            match b.relationships.get(id) {
                None => self.push(Entity::Relationship, id, None, Some(json(&ea.name)), None),
                Some(eb) => {
                    self.field(Entity::Relationship, id, "$source", &ea.source, &eb.source);
                    self.field(Entity::Relationship, id, "$target", &ea.target, &eb.target);
                    self.field(Entity::Relationship, id, "$name", &ea.name, &eb.name);
                    self.props(Entity::Relationship, id, &ea.properties, &eb.properties);
                }
            }
        }
        for (id, eb) in &b.relationships {
            if !a.relationships.contains_key(id) {
                self.push(Entity::Relationship, id, None, None, Some(json(&eb.name)));
            }
        }
    }
}

/// Differences from `a` to `b`, sorted by role, entity kind, id and path.
pub fn diff(a: &GraphView, b: &GraphView) -> DiffReport {
    let mut entries = Vec::new();
    let empty = InstanceGraph::default();
    let roles: std::collections::BTreeSet<&String> = a.instances.keys().chain(b.instances.keys()).collect();
    for role in roles {
        let mut d = Differ { role, out: Vec::new() };
        match (a.instances.get(role), b.instances.get(role)) {
            (Some(ga), Some(gb)) => d.instance(ga, gb),
            (Some(ga), None) => {
                d.push(Entity::Instance, role, None, Some(json(&true)), None);
                d.instance(ga, &empty);
            }
            (None, Some(gb)) => {
                d.push(Entity::Instance, role, None, None, Some(json(&true)));
                d.instance(&empty, gb);
            }
            (None, None) => unreachable!("role comes from one side"),
        }
        entries.extend(d.out);
    }
    entries.sort_by(|x, y| (&x.role, x.entity, &x.id, &x.path).cmp(&(&y.role, y.entity, &y.id, &y.path)));
    DiffReport { entries }
}

/// A graph change read off an instance event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphEvent {
    TwinCreated { role: String, id: String, model: String },
    TwinDeleted { role: String, id: String },
    Property { role: String, id: String, path: String, value: Option<Value> },
    RelationshipCreated { role: String, id: String },
    RelationshipDeleted { role: String, id: String },
    RelationshipProperty { role: String, id: String, path: String, value: Option<Value> },
}

/// Resolves raw events against the engine that produced them.
pub fn resolve_events(engine: &Engine, roles: &BTreeMap<String, InstanceHandle>, events: &[EventRecord]) -> Result<Vec<GraphEvent>, WhatIfError> {
    let by_handle: BTreeMap<InstanceHandle, &String> = roles.iter().map(|(r, &h)| (h, r)).collect();
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        let Some(&role) = by_handle.get(&e.instance) else { continue };
        let inst = engine.instance(e.instance)?;
        let role = role.clone();
        let id = inst.event_entity(e).to_string();
        let path = || inst.event_path(e).map(|p| p.to_string()).unwrap_or_default();
        out.push(match e.subject {
            EventSubject::TwinCreated(_) => {
                let model = inst.twin_state(&id).map(|t| t.model).unwrap_or_default();
                GraphEvent::TwinCreated { role, id, model }
            }
            EventSubject::TwinDeleted(_) => GraphEvent::TwinDeleted { role, id },
            EventSubject::Property { .. } => GraphEvent::Property { role, id, path: path(), value: e.new },
            EventSubject::RelationshipCreated(_) => GraphEvent::RelationshipCreated { role, id },
            EventSubject::RelationshipDeleted(_) => GraphEvent::RelationshipDeleted { role, id },
            EventSubject::RelationshipProperty { .. } => GraphEvent::RelationshipProperty { role, id, path: path(), value: e.new },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriveConfig {
    pub scenario: ScenarioConfig,
    pub xapp: XappConfig,
    /// Drive start; moved up to the copy's ready time if earlier.
    #[serde(with = "unix_micros")]
    pub start: SimTime,
    pub duration_s: f64,
    pub keep_events: bool,
}

impl Default for DriveConfig {
    fn default() -> Self {
        DriveConfig {
            scenario: ScenarioConfig::default(),
            xapp: XappConfig::default(),
            start: SimTime::ZERO,
            duration_s: 10.0,
            keep_events: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveReport {
    pub copy: usize,
    #[serde(with = "unix_micros")]
    pub started_at: SimTime,
    #[serde(with = "unix_micros")]
    pub ended_at: SimTime,
    /// Handovers the emulator triggered.
    pub triggered_handovers: u64,
    /// Handover transcripts the bridge opened.
    pub transcripts: usize,
    pub bridge: BridgeStats,
    pub events: Vec<GraphEvent>,
}

/// Feeds a copy from a fresh emulator and bridge for `duration_s` of
/// simulated time. The bridge adopts the copy's instances as they are.
pub fn drive_scenario(copy: &mut DeploymentCopy, config: &DriveConfig) -> Result<DriveReport, WhatIfError> {
    if !(config.duration_s >= 0.0) {
        return Err(WhatIfError::Invalid(format!("duration {} s", config.duration_s)));
    }
    let start = config.start.max(copy.ready_at);
    let end = start + Duration::from_secs_f64(config.duration_s);
    let mut xapp = config.xapp.clone();
    xapp.prefix = copy.prefix.clone();
    let mut network = Network::new(config.scenario.clone())?;
    if start != network.clock() {
        network.set_start(start)?;
    }
    let setups = (1..=network.cells().len() as u32).map(|c| network.e2_setup(c)).collect::<Result<Vec<_>, _>>()?;
    let bridge = Bridge::adopt(xapp, &copy.engine, &setups, start)?;
    // whatever the spawn published is not part of this drive
    for slot in copy.engine.slots_mut().iter_mut().flatten() {
        slot.drain_events();
    }
    let engine = std::mem::take(&mut copy.engine);
    let mut d = Deployment::with_parts(engine, network, bridge)?;
    d.keep_events = config.keep_events;
    let run = d.start(start).and_then(|_| d.run_until(end, &mut |_| {}));
    let triggered = d.network.handovers();
    let transcripts = d.bridge.transcripts().len();
    let bridge = *d.bridge.stats();
    let ended_at = d.now();
    let log = d.take_event_log();
    copy.engine = d.into_engine();
    run?;
    let events = resolve_events(&copy.engine, &copy.roles, &log)?;
    Ok(DriveReport { copy: copy.index, started_at: start, ended_at, triggered_handovers: triggered, transcripts, bridge, events })
}

/// Applies resolved events to a view, as the engine applied them.
pub fn replay(view: &mut GraphView, events: &[GraphEvent]) {
    for e in events {
        match e {
            GraphEvent::TwinCreated { role, id, model } => {
                view.instances.entry(role.clone()).or_default().twins.insert(id.clone(), TwinNode { model: model.clone(), properties: BTreeMap::new() });
            }
            GraphEvent::TwinDeleted { role, id } => {
                if let Some(g) = view.instances.get_mut(role) {
                    g.twins.remove(id);
                }
            }
            GraphEvent::Property { role, id, path, value } => {
                if let Some(t) = view.instances.get_mut(role).and_then(|g| g.twins.get_mut(id)) {
                    match value {
                        Some(v) => t.properties.insert(path.clone(), *v),
                        None => t.properties.remove(path),
                    };
                }
            }
            GraphEvent::RelationshipCreated { role, id } => {
                view.instances.entry(role.clone()).or_default().relationships.entry(id.clone()).or_insert(EdgeNode {
                    source: String::new(),
                    target: String::new(),
                    name: String::new(),
                    properties: BTreeMap::new(),
                });
            }
            GraphEvent::RelationshipDeleted { role, id } => {
                if let Some(g) = view.instances.get_mut(role) {
                    g.relationships.remove(id);
                }
            }
            GraphEvent::RelationshipProperty { role, id, path, value } => {
                if let Some(r) = view.instances.get_mut(role).and_then(|g| g.relationships.get_mut(id)) {
                    match value {
                        Some(v) => r.properties.insert(path.clone(), *v),
                        None => r.properties.remove(path),
                    };
                }
            }
        }
    }
}

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::costing::UsageMeter;
use crate::latency::{LatencyKind, LatencySampler};
use crate::model::{validate_patch, ModelInterface, ModelRegistry, ResolvedModel};
use crate::time::SimTime;
use crate::value::Value;

use super::rate::RateWindow;
use super::wire::{canonical_size, unix_micros, opt_unix_micros, PatchEntry};
use super::{ClockMode, EngineConfig, EngineError, InstanceHandle, RateScope, RelKey, TwinKey, UpdateReceipt};

/// Stored value of one property.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyValue {
    pub value: Value,
    #[serde(rename = "lastUpdatedTime", with = "unix_micros")]
    pub last_updated: SimTime,
    #[serde(rename = "sourceTime", with = "opt_unix_micros", default)]
    pub source_time: Option<SimTime>,
}

/// What an event is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventSubject {
    Property { twin: TwinKey, slot: u32 },
    TwinCreated(TwinKey),
    TwinDeleted(TwinKey),
    RelationshipCreated(RelKey),
    RelationshipDeleted(RelKey),
    RelationshipProperty { rel: RelKey, slot: u32 },
}

/// Change notification published on the instance event stream.
///
/// Records are small and `Copy`; ids and paths are resolved through
/// [`Instance::twin_id`], [`Instance::event_path`] and friends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub instance: InstanceHandle,
    pub subject: EventSubject,
    pub old: Option<Value>,
    pub new: Option<Value>,
    pub last_updated: SimTime,
    pub source_time: Option<SimTime>,
    pub seq: u64,
}

impl EventRecord {
    pub fn twin(&self) -> Option<TwinKey> {
        match self.subject {
            EventSubject::Property { twin, .. } | EventSubject::TwinCreated(twin) | EventSubject::TwinDeleted(twin) => {
                Some(twin)
            }
            _ => None,
        }
    }

    pub fn is_property(&self) -> bool {
        matches!(self.subject, EventSubject::Property { .. })
    }
}

/// Read view of a twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinState {
    pub id: String,
    pub model: String,
    pub properties: BTreeMap<String, PropertyValue>,
    /// Outgoing relationships.
    #[serde(default)]
    pub relationships: Vec<RelationshipState>,
    /// Ids of incoming relationships.
    #[serde(default)]
    pub incoming: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationshipState {
    pub id: String,
    pub source: String,
    pub target: String,
    pub name: String,
    pub properties: BTreeMap<String, PropertyValue>,
}

/// A read result with its sampled completion.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult<T> {
    pub value: T,
    pub completes_at: SimTime,
    pub latency: Duration,
    pub query_units: u64,
}

/// Per-instance counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub updates_accepted: u64,
    pub updates_rejected: u64,
    pub rate_limited: u64,
    pub too_large: u64,
    pub invalid: u64,
    pub unknown_twin: u64,
    pub properties_patched: u64,
    pub events_emitted: u64,
    pub property_events: u64,
    pub twins_created: u64,
    pub twins_deleted: u64,
    pub relationships_created: u64,
    pub relationships_deleted: u64,
    /// Most accepted updates seen in any one-second window on one twin.
    pub peak_twin_rate: u32,
    /// Most accepted updates seen in any one-second window on the instance.
    pub peak_instance_rate: u32,
}

const WINDOW: Duration = Duration::from_secs(1);

#[derive(Debug, Clone)]
struct TwinData {
    model: Arc<ResolvedModel>,
    props: Vec<Option<PropertyValue>>,
    visible_at: SimTime,
    busy_until: SimTime,
    gate: RateWindow,
    accepted: RateWindow,
    outgoing: Vec<RelKey>,
    incoming: Vec<RelKey>,
}

#[derive(Debug, Clone)]
struct TwinEntry {
    id: Arc<str>,
    model: Arc<ResolvedModel>,
    /// `None` once deleted; keys are never reused so old events stay resolvable.
    data: Option<TwinData>,
}

#[derive(Debug, Clone)]
struct RelData {
    source: TwinKey,
    target: TwinKey,
    schema: Arc<ResolvedModel>,
    props: Vec<Option<PropertyValue>>,
    busy_until: SimTime,
}

#[derive(Debug, Clone)]
struct RelEntry {
    id: Arc<str>,
    name: Arc<str>,
    schema: Arc<ResolvedModel>,
    data: Option<RelData>,
}

/// One engine instance: a model registry, a twin graph, its rate gates,
/// event stream and meter.
#[derive(Debug, Clone)]
pub struct Instance {
    id: Arc<str>,
    handle: InstanceHandle,
    clock_mode: ClockMode,
    wall_origin: Option<Instant>,
    config: EngineConfig,
    clock: SimTime,
    models: ModelRegistry,
    rel_schemas: HashMap<(String, String), Arc<ResolvedModel>>,
    twins: Vec<TwinEntry>,
    twin_index: HashMap<Arc<str>, TwinKey>,
    rels: Vec<RelEntry>,
    rel_index: HashMap<Arc<str>, RelKey>,
    gate: RateWindow,
    accepted: VecDeque<SimTime>,
    next_create: SimTime,
    events: Vec<EventRecord>,
    seq: u64,
    sampler: LatencySampler,
    meter: UsageMeter,
    stats: InstanceStats,
}

impl Instance {
    pub(crate) fn new(id: Arc<str>, handle: InstanceHandle, clock_mode: ClockMode, seed: u64, config: EngineConfig) -> Self {
        let sampler = LatencySampler::new(config.latency.clone(), seed, 0);
        let mut meter = UsageMeter::default();
        meter.operations += 1;
        Instance {
            id,
            handle,
            clock_mode,
            wall_origin: (clock_mode == ClockMode::RealTime).then(Instant::now),
            gate: RateWindow::new(config.limits.max_updates_per_instance_per_second),
            config,
            clock: SimTime::ZERO,
            models: ModelRegistry::new(),
            rel_schemas: HashMap::new(),
            twins: Vec::new(),
            twin_index: HashMap::new(),
            rels: Vec::new(),
            rel_index: HashMap::new(),
            accepted: VecDeque::new(),
            next_create: SimTime::ZERO,
            events: Vec::new(),
            seq: 0,
            sampler,
            meter,
            stats: InstanceStats::default(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn handle(&self) -> InstanceHandle {
        self.handle
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.clock_mode
    }

    /// Time of the latest call.
    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn meter(&self) -> &UsageMeter {
        &self.meter
    }

    pub fn meter_mut(&mut self) -> &mut UsageMeter {
        &mut self.meter
    }

    pub fn stats(&self) -> &InstanceStats {
        &self.stats
    }

    pub fn models(&self) -> &ModelRegistry {
        &self.models
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Moves the clock to `at`, or to the wall clock in real-time mode.
    fn advance(&mut self, at: SimTime) -> Result<SimTime, EngineError> {
        let at = match self.wall_origin {
            Some(origin) => at.max(SimTime::from_micros(origin.elapsed().as_micros() as u64)),
            None => at,
        };
        if at < self.clock {
            return Err(EngineError::ClockRegression { at, clock: self.clock });
        }
        self.clock = at;
        Ok(at)
    }

    /// In real-time mode, blocks until `t` has passed on the wall clock.
    fn wait_until(&self, t: SimTime) {
        if let Some(origin) = self.wall_origin {
            let now = origin.elapsed();
            let due = Duration::from_micros(t.as_micros());
            if due > now {
                std::thread::sleep(due - now);
            }
        }
    }

    /// Uploads model documents in order. Each upload is one operation.
    pub fn upload_models(&mut self, at: SimTime, docs: &[&str]) -> Result<Vec<Arc<ResolvedModel>>, EngineError> {
        self.advance(at)?;
        docs.iter()
            .map(|d| {
                let m = self.models.parse_and_insert(d)?;
                self.meter.operations += 1;
                Ok(m)
            })
            .collect()
    }

    pub fn add_model(&mut self, at: SimTime, model: ModelInterface) -> Result<Arc<ResolvedModel>, EngineError> {
        self.advance(at)?;
        let m = self.models.insert(model)?;
        self.meter.operations += 1;
        Ok(m)
    }

    fn resolve_model(&self, id: &str) -> Result<Arc<ResolvedModel>, EngineError> {
        self.models.resolved(id).cloned().ok_or_else(|| EngineError::UnknownModel(id.to_string()))
    }

    fn rel_schema(&mut self, model: &ModelInterface, name: &str) -> Result<Arc<ResolvedModel>, EngineError> {
        let key = (model.id.clone(), name.to_string());
        if let Some(s) = self.rel_schemas.get(&key) {
            return Ok(s.clone());
        }
        let def = model.relationship(name).ok_or_else(|| EngineError::UnknownRelationshipName(name.to_string()))?;
        let mut scratch = ModelRegistry::new();
        let schema = scratch.insert(ModelInterface {
            id: format!("{}#{}", model.id, name),
            properties: def.properties.clone(),
            relationships: vec![],
            components: vec![],
        })?;
        self.rel_schemas.insert(key, schema.clone());
        Ok(schema)
    }

    /// True if a twin with this id exists, visible or not.
    pub fn has_twin(&self, id: &str) -> bool {
        self.twin_index.contains_key(id)
    }

    pub fn is_visible(&self, id: &str, at: SimTime) -> bool {
        self.live(id).is_some_and(|(_, d)| d.visible_at <= at)
    }

    pub fn twin_key(&self, id: &str) -> Option<TwinKey> {
        self.twin_index.get(id).copied()
    }

    pub fn twin_count(&self) -> usize {
        self.twin_index.len()
    }

    pub fn relationship_count(&self) -> usize {
        self.rel_index.len()
    }

    /// Ids of live twins in creation order.
    pub fn twin_ids(&self) -> impl Iterator<Item = &str> {
        self.twins.iter().filter(|t| t.data.is_some()).map(|t| &*t.id)
    }

    pub fn twin_id(&self, key: TwinKey) -> &str {
        &self.twins[key.0 as usize].id
    }

    pub fn twin_id_arc(&self, key: TwinKey) -> &Arc<str> {
        &self.twins[key.0 as usize].id
    }

    pub fn id_arc(&self) -> &Arc<str> {
        &self.id
    }

    pub fn relationship_id(&self, key: RelKey) -> &str {
        &self.rels[key.0 as usize].id
    }

    /// Path of the property an event refers to, if any.
    pub fn event_path(&self, e: &EventRecord) -> Option<&Arc<str>> {
        match e.subject {
            EventSubject::Property { twin, slot } => Some(&self.twins[twin.0 as usize].model.slot(slot).path),
            EventSubject::RelationshipProperty { rel, slot } => Some(&self.rels[rel.0 as usize].schema.slot(slot).path),
            _ => None,
        }
    }

    /// Id of the twin or relationship an event refers to.
    pub fn event_entity(&self, e: &EventRecord) -> &str {
        match e.subject {
            EventSubject::Property { twin, .. } | EventSubject::TwinCreated(twin) | EventSubject::TwinDeleted(twin) => {
                self.twin_id(twin)
            }
            EventSubject::RelationshipCreated(r)
            | EventSubject::RelationshipDeleted(r)
            | EventSubject::RelationshipProperty { rel: r, .. } => self.relationship_id(r),
        }
    }

    fn live(&self, id: &str) -> Option<(TwinKey, &TwinData)> {
        let key = *self.twin_index.get(id)?;
        self.twins[key.0 as usize].data.as_ref().map(|d| (key, d))
    }

    /// Key of a twin visible at `at`.
    fn visible_key(&self, id: &str, at: SimTime) -> Result<TwinKey, EngineError> {
        match self.live(id) {
            Some((k, d)) if d.visible_at <= at => Ok(k),
            _ => Err(EngineError::UnknownTwin(id.to_string())),
        }
    }

    fn data_mut(&mut self, key: TwinKey) -> &mut TwinData {
        self.twins[key.0 as usize].data.as_mut().expect("live twin")
    }

    fn emit(&mut self, subject: EventSubject, old: Option<Value>, new: Option<Value>, last_updated: SimTime, source_time: Option<SimTime>) {
        self.events.push(EventRecord {
            instance: self.handle,
            subject,
            old,
            new,
            last_updated,
            source_time,
            seq: self.seq,
        });
        self.seq += 1;
        self.stats.events_emitted += 1;
        if matches!(subject, EventSubject::Property { .. }) {
            self.stats.property_events += 1;
        }
    }

    /// Events emitted since the last drain, in emission order.
    pub fn drain_events(&mut self) -> Vec<EventRecord> {
        std::mem::take(&mut self.events)
    }

    pub fn drain_events_into(&mut self, out: &mut Vec<EventRecord>) {
        out.append(&mut self.events);
    }

    pub fn pending_events(&self) -> &[EventRecord] {
        &self.events
    }

    /// Creates a twin. It becomes visible after the bulk-create queue and the
    /// sampled creation latency; the receipt's `response_time` is that moment.
    pub fn create_twin(
        &mut self,
        at: SimTime,
        id: &str,
        model_id: &str,
        initial: &[(&str, Value)],
    ) -> Result<UpdateReceipt, EngineError> {
        let at = self.advance(at)?;
        let model = self.resolve_model(model_id)?;
        if self.twin_index.contains_key(id) {
            return Err(EngineError::DuplicateTwin(id.to_string()));
        }
        let verdict = validate_patch(&model, initial.iter().map(|(p, v)| (*p, Some(v))));
        if !verdict.is_accept() {
            return Err(EngineError::ValidationFailed(verdict));
        }
        let admitted = at.max(self.next_create);
        self.next_create = admitted + self.config.latency.create_spacing();
        let latency = self.sampler.sample(LatencyKind::Create, model.parameter_count(), 0);
        let visible_at = admitted + latency;

        let mut props = vec![None; model.parameter_count()];
        for (p, v) in initial {
            let slot = model.slot_of(p).expect("validated path");
            props[slot as usize] = Some(PropertyValue { value: *v, last_updated: visible_at, source_time: None });
        }
        let limits = self.config.limits;
        let key = TwinKey(self.twins.len() as u32);
        let id: Arc<str> = id.into();
        self.twins.push(TwinEntry {
            id: id.clone(),
            model: model.clone(),
            data: Some(TwinData {
                model,
                props,
                visible_at,
                busy_until: SimTime::ZERO,
                gate: RateWindow::new(limits.max_updates_per_twin_per_second),
                accepted: RateWindow::new(limits.max_updates_per_twin_per_second + 1),
                outgoing: Vec::new(),
                incoming: Vec::new(),
            }),
        });
        self.twin_index.insert(id, key);
        self.emit(EventSubject::TwinCreated(key), None, None, visible_at, None);
        self.meter.operations += 1;
        self.stats.twins_created += 1;
        self.wait_until(visible_at);
        Ok(UpdateReceipt { response_time: visible_at, service: visible_at.since(at), lag: Duration::ZERO, lock_wait: Duration::ZERO })
    }

    fn instance_gate(&mut self, at: SimTime) -> Result<(), EngineError> {
        let ok = self.gate.allows(at);
        self.gate.admit(at);
        if ok {
            Ok(())
        } else {
            Err(EngineError::RateLimitExceeded(RateScope::Instance))
        }
    }

    fn note_accepted(&mut self, at: SimTime) {
        while self.accepted.front().is_some_and(|&t| t + WINDOW <= at) {
            self.accepted.pop_front();
        }
        self.accepted.push_back(at);
        self.stats.peak_instance_rate = self.stats.peak_instance_rate.max(self.accepted.len() as u32);
        self.stats.updates_accepted += 1;
        self.meter.messages += 1;
    }

    fn reject(&mut self, e: EngineError) -> EngineError {
        self.stats.updates_rejected += 1;
        match &e {
            EngineError::RateLimitExceeded(_) => self.stats.rate_limited += 1,
            EngineError::PayloadTooLarge { .. } => self.stats.too_large += 1,
            EngineError::ValidationFailed(_) => self.stats.invalid += 1,
            EngineError::UnknownTwin(_) | EngineError::UnknownRelationship(_) => self.stats.unknown_twin += 1,
            _ => {}
        }
        e
    }

    fn check_size(&self, patch: &[PatchEntry]) -> Result<(), EngineError> {
        let limit = self.config.limits.max_patch_bytes;
        // cheap upper bound first; serialize only when it might matter
        let bound: usize = 2 + patch.iter().map(|e| 80 + 6 * e.path.len()).sum::<usize>();
        if bound <= limit {
            return Ok(());
        }
        let bytes = canonical_size(patch);
        if bytes > limit {
            return Err(EngineError::PayloadTooLarge { bytes, limit });
        }
        Ok(())
    }

    /// Applies a patch to a twin.
    ///
    /// Checks run in this order: clock, twin visibility, rate gates, payload
    /// size, validation. Every call that reaches the rate gates takes a slot
    /// in them, accepted or not.
    pub fn update_twin(&mut self, at: SimTime, id: &str, patch: &[PatchEntry]) -> Result<UpdateReceipt, EngineError> {
        let at = self.advance(at)?;
        let key = match self.visible_key(id, at) {
            Ok(k) => k,
            Err(e) => {
                let _ = self.instance_gate(at);
                return Err(self.reject(e));
            }
        };
        let twin_ok = {
            let d = self.data_mut(key);
            let ok = d.gate.allows(at);
            d.gate.admit(at);
            ok
        };
        let inst_ok = self.instance_gate(at);
        if !twin_ok {
            return Err(self.reject(EngineError::RateLimitExceeded(RateScope::Twin)));
        }
        if let Err(e) = inst_ok {
            return Err(self.reject(e));
        }
        if let Err(e) = self.check_size(patch) {
            return Err(self.reject(e));
        }
        let model = self.data_mut(key).model.clone();
        let verdict = validate_patch(&model, patch.iter().map(|e| (&*e.path, e.value.as_ref())));
        if !verdict.is_accept() {
            return Err(self.reject(EngineError::ValidationFailed(verdict)));
        }

        let (m, u) = (model.parameter_count(), patch.len());
        let service = self.sampler.sample(LatencyKind::Service, m, u);
        let lag = self.sampler.sample(LatencyKind::Lag, m, u);
        let penalty = self.config.latency.lock_penalty();
        let base = patch.iter().map(|e| e.source_time).fold(at, SimTime::max);
        let d = self.data_mut(key);
        let lock_wait = if at < d.busy_until { penalty } else { Duration::ZERO };
        let (service, lag) = (service + lock_wait, lag + lock_wait);
        let response_time = base + service;
        let last_updated = base + lag;
        d.busy_until = d.busy_until.max(response_time);
        d.accepted.admit(at);
        let twin_rate = d.accepted.count_in_window(at) as u32;

        let mut changes = Vec::with_capacity(patch.len());
        for e in patch {
            let slot = model.slot_of(&e.path).expect("validated path");
            let cell = &mut d.props[slot as usize];
            let old = cell.map(|p| p.value);
            *cell = e.value.map(|value| PropertyValue { value, last_updated, source_time: Some(e.source_time) });
            changes.push((slot, old, e.value, e.source_time));
        }
        for (slot, old, new, src) in changes {
            self.emit(EventSubject::Property { twin: key, slot }, old, new, last_updated, Some(src));
        }
        self.stats.peak_twin_rate = self.stats.peak_twin_rate.max(twin_rate);
        self.stats.properties_patched += u as u64;
        self.note_accepted(at);
        self.wait_until(response_time);
        Ok(UpdateReceipt { response_time, service, lag, lock_wait })
    }

    /// Deletes a twin that has no relationships left.
    pub fn delete_twin(&mut self, at: SimTime, id: &str) -> Result<UpdateReceipt, EngineError> {
        let at = self.advance(at)?;
        let key = self.visible_key(id, at)?;
        let d = self.twins[key.0 as usize].data.as_ref().expect("live twin");
        if !d.outgoing.is_empty() || !d.incoming.is_empty() {
            return Err(EngineError::TwinHasRelationships(id.to_string()));
        }
        let m = d.model.parameter_count();
        let service = self.sampler.sample(LatencyKind::Service, m, 0);
        let response_time = at + service;
        self.twins[key.0 as usize].data = None;
        self.twin_index.remove(id);
        self.emit(EventSubject::TwinDeleted(key), None, None, response_time, None);
        self.meter.operations += 1;
        self.stats.twins_deleted += 1;
        self.wait_until(response_time);
        Ok(UpdateReceipt { response_time, service, lag: Duration::ZERO, lock_wait: Duration::ZERO })
    }

    /// Creates a named relationship between two visible twins of this instance.
    pub fn create_relationship(
        &mut self,
        at: SimTime,
        rel_id: &str,
        source: &str,
        target: &str,
        name: &str,
        payload: &[(&str, Value)],
    ) -> Result<UpdateReceipt, EngineError> {
        let at = self.advance(at)?;
        let src = self.visible_key(source, at)?;
        let dst = self.visible_key(target, at)?;
        if self.rel_index.contains_key(rel_id) {
            return Err(EngineError::DuplicateRelationship(rel_id.to_string()));
        }
        let src_model = self.twins[src.0 as usize].model.clone();
        let schema = self.rel_schema(&src_model.interface, name)?;
        let def = src_model.interface.relationship(name).expect("schema exists");
        let dst_model = self.twins[dst.0 as usize].model.id().to_string();
        if def.target != dst_model {
            return Err(EngineError::WrongTarget { relationship: name.to_string(), expected: def.target.clone(), got: dst_model });
        }
        let verdict = validate_patch(&schema, payload.iter().map(|(p, v)| (*p, Some(v))));
        if !verdict.is_accept() {
            return Err(EngineError::ValidationFailed(verdict));
        }
        let (service, lag) = self.relationship_latency(src_model.parameter_count(), payload.len().max(1));
        let response_time = at + service;
        let last_updated = at + lag;
        let mut props = vec![None; schema.parameter_count()];
        for (p, v) in payload {
            let slot = schema.slot_of(p).expect("validated path");
            props[slot as usize] = Some(PropertyValue { value: *v, last_updated, source_time: None });
        }
        let key = RelKey(self.rels.len() as u32);
        let rid: Arc<str> = rel_id.into();
        self.rels.push(RelEntry {
            id: rid.clone(),
            name: name.into(),
            schema: schema.clone(),
            data: Some(RelData { source: src, target: dst, schema, props, busy_until: response_time }),
        });
        self.rel_index.insert(rid, key);
        self.data_mut(src).outgoing.push(key);
        self.data_mut(dst).incoming.push(key);
        self.emit(EventSubject::RelationshipCreated(key), None, None, last_updated, None);
        self.meter.operations += 1;
        self.stats.relationships_created += 1;
        self.wait_until(response_time);
        Ok(UpdateReceipt { response_time, service, lag, lock_wait: Duration::ZERO })
    }

    fn relationship_latency(&mut self, m: usize, u: usize) -> (Duration, Duration) {
        let extra = self.config.latency.relationship_surcharge();
        let service = self.sampler.sample(LatencyKind::Service, m, u) + extra;
        let lag = self.sampler.sample(LatencyKind::Lag, m, u) + extra;
        (service, lag)
    }

    fn rel_key(&self, rel_id: &str) -> Result<RelKey, EngineError> {
        self.rel_index.get(rel_id).copied().ok_or_else(|| EngineError::UnknownRelationship(rel_id.to_string()))
    }

    /// Patches relationship payload properties. Counted as an update call on
    /// the instance gate.
    pub fn update_relationship(&mut self, at: SimTime, rel_id: &str, patch: &[PatchEntry]) -> Result<UpdateReceipt, EngineError> {
        let at = self.advance(at)?;
        let key = match self.rel_key(rel_id) {
            Ok(k) => k,
            Err(e) => return Err(self.reject(e)),
        };
        if let Err(e) = self.instance_gate(at) {
            return Err(self.reject(e));
        }
        if let Err(e) = self.check_size(patch) {
            return Err(self.reject(e));
        }
        let schema = self.rels[key.0 as usize].schema.clone();
        let verdict = validate_patch(&schema, patch.iter().map(|e| (&*e.path, e.value.as_ref())));
        if !verdict.is_accept() {
            return Err(self.reject(EngineError::ValidationFailed(verdict)));
        }
        let data = self.rels[key.0 as usize].data.as_ref().expect("live relationship");
        let m = self.twins[data.source.0 as usize].model.parameter_count();
        let (service, lag) = self.relationship_latency(m, patch.len());
        let penalty = self.config.latency.lock_penalty();
        let base = patch.iter().map(|e| e.source_time).fold(at, SimTime::max);
        let data = self.rels[key.0 as usize].data.as_mut().expect("live relationship");
        let lock_wait = if at < data.busy_until { penalty } else { Duration::ZERO };
        let (service, lag) = (service + lock_wait, lag + lock_wait);
        let response_time = base + service;
        let last_updated = base + lag;
        data.busy_until = data.busy_until.max(response_time);
        let mut changes = Vec::with_capacity(patch.len());
        for e in patch {
            let slot = data.schema.slot_of(&e.path).expect("validated path");
            let cell = &mut data.props[slot as usize];
            let old = cell.map(|p| p.value);
            *cell = e.value.map(|value| PropertyValue { value, last_updated, source_time: Some(e.source_time) });
            changes.push((slot, old, e.value, e.source_time));
        }
        for (slot, old, new, src) in changes {
            self.emit(EventSubject::RelationshipProperty { rel: key, slot }, old, new, last_updated, Some(src));
        }
        self.stats.properties_patched += patch.len() as u64;
        self.note_accepted(at);
        self.wait_until(response_time);
        Ok(UpdateReceipt { response_time, service, lag, lock_wait })
    }

    pub fn delete_relationship(&mut self, at: SimTime, rel_id: &str) -> Result<UpdateReceipt, EngineError> {
        let at = self.advance(at)?;
        let key = self.rel_key(rel_id)?;
        let data = self.rels[key.0 as usize].data.take().expect("live relationship");
        self.rel_index.remove(rel_id);
        self.data_mut(data.source).outgoing.retain(|&r| r != key);
        self.data_mut(data.target).incoming.retain(|&r| r != key);
        let m = self.twins[data.source.0 as usize].model.parameter_count();
        let (service, lag) = self.relationship_latency(m, 1);
        let response_time = at + service;
        self.emit(EventSubject::RelationshipDeleted(key), None, None, at + lag, None);
        self.meter.operations += 1;
        self.stats.relationships_deleted += 1;
        self.wait_until(response_time);
        Ok(UpdateReceipt { response_time, service, lag, lock_wait: Duration::ZERO })
    }

    fn props_map(model: &ResolvedModel, props: &[Option<PropertyValue>]) -> BTreeMap<String, PropertyValue> {
        props
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (model.slot(i as u32).path.to_string(), p)))
            .collect()
    }

    fn rel_state(&self, key: RelKey) -> Option<RelationshipState> {
        let e = &self.rels[key.0 as usize];
        let d = e.data.as_ref()?;
        Some(RelationshipState {
            id: e.id.to_string(),
            source: self.twin_id(d.source).to_string(),
            target: self.twin_id(d.target).to_string(),
            name: e.name.to_string(),
            properties: Self::props_map(&d.schema, &d.props),
        })
    }

    fn state_of(&self, key: TwinKey) -> TwinState {
        let e = &self.twins[key.0 as usize];
        let d = e.data.as_ref().expect("live twin");
        TwinState {
            id: e.id.to_string(),
            model: d.model.id().to_string(),
            properties: Self::props_map(&d.model, &d.props),
            relationships: d.outgoing.iter().filter_map(|&r| self.rel_state(r)).collect(),
            incoming: d.incoming.iter().map(|&r| self.relationship_id(r).to_string()).collect(),
        }
    }

    /// Unmetered inspection of a live twin, visible or not.
    pub fn twin_state(&self, id: &str) -> Option<TwinState> {
        self.live(id).map(|(k, _)| self.state_of(k))
    }

    pub fn relationship_state(&self, rel_id: &str) -> Option<RelationshipState> {
        self.rel_key(rel_id).ok().and_then(|k| self.rel_state(k))
    }

    /// All live relationships in creation order, unmetered.
    pub fn relationships(&self) -> Vec<RelationshipState> {
        (0..self.rels.len() as u32).filter_map(|k| self.rel_state(RelKey(k))).collect()
    }

    pub fn property(&self, twin: &str, path: &str) -> Option<&PropertyValue> {
        let (_, d) = self.live(twin)?;
        d.props[d.model.slot_of(path)? as usize].as_ref()
    }

    fn read_latency(&mut self, key: TwinKey, at: SimTime) -> Duration {
        let penalty = self.config.latency.lock_penalty();
        let d = self.twins[key.0 as usize].data.as_ref().expect("live twin");
        let m = d.model.parameter_count();
        let wait = if at < d.busy_until { penalty } else { Duration::ZERO };
        self.sampler.sample(LatencyKind::Query, m, 0) + wait
    }

    /// Query-language read of one twin: one query unit.
    pub fn query_twin(&mut self, at: SimTime, id: &str) -> Result<QueryResult<TwinState>, EngineError> {
        let at = self.advance(at)?;
        let key = self.visible_key(id, at)?;
        let latency = self.read_latency(key, at);
        self.meter.query_units += 1;
        self.wait_until(at + latency);
        Ok(QueryResult { value: self.state_of(key), completes_at: at + latency, latency, query_units: 1 })
    }

    /// Direct read by id: billed as one operation, no query units.
    pub fn get_twin(&mut self, at: SimTime, id: &str) -> Result<QueryResult<TwinState>, EngineError> {
        let at = self.advance(at)?;
        let key = self.visible_key(id, at)?;
        let latency = self.read_latency(key, at);
        self.meter.operations += 1;
        self.wait_until(at + latency);
        Ok(QueryResult { value: self.state_of(key), completes_at: at + latency, latency, query_units: 0 })
    }

    /// Query enumerating every visible twin with its outgoing relationships.
    /// Charges one query unit per twin returned, at least one.
    pub fn query_instance(&mut self, at: SimTime) -> Result<QueryResult<Vec<TwinState>>, EngineError> {
        let at = self.advance(at)?;
        let keys: Vec<TwinKey> = (0..self.twins.len() as u32)
            .map(TwinKey)
            .filter(|k| self.twins[k.0 as usize].data.as_ref().is_some_and(|d| d.visible_at <= at))
            .collect();
        let largest = keys.iter().map(|k| self.twins[k.0 as usize].model.parameter_count()).max().unwrap_or(0);
        let latency = self.sampler.sample(LatencyKind::Query, largest, 0);
        let units = (keys.len() as u64).max(1);
        self.meter.query_units += units;
        let value = keys.iter().map(|&k| self.state_of(k)).collect();
        self.wait_until(at + latency);
        Ok(QueryResult { value, completes_at: at + latency, latency, query_units: units })
    }
}

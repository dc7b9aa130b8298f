//! Twin model interfaces: a JSON subset of DTDL v2.
//!
//! A model document looks like
//!
//! ```json
//! {
//!   "id": "dtmi:twinran:cell:ue;1",
//!   "properties": [{"name": "UL CQI", "schema": "integer", "range": {"min": 0, "max": 15}}],
//!   "relationships": [],
//!   "components": [{"name": "UE1", "interface": "dtmi:twinran:multi:ue;1"}]
//! }
//! ```
//!
//! Properties carry a `schema` (`integer`, `float` or `geospatial-point`) and
//! optionally either a closed `range` (either bound may be omitted) or a
//! `candidates` list. Component properties are addressed with dotted paths
//! (`UE1.RSRP`).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::Value;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("semantic error in {model}: {reason}")]
    Semantic { model: String, reason: String },
    #[error("unknown model {0}")]
    UnknownModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schema {
    #[serde(rename = "integer")]
    Integer,
    #[serde(rename = "float")]
    Float,
    #[serde(rename = "geospatial-point")]
    GeoPoint,
}

/// Closed interval; a missing bound is unbounded on that side.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl Interval {
    pub fn closed(min: f64, max: f64) -> Self {
        Interval { min: Some(min), max: Some(max) }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.min.is_none_or(|lo| v >= lo) && self.max.is_none_or(|hi| v <= hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    Range(Interval),
    Candidates(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertyDef {
    pub name: String,
    pub schema: Schema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<Interval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<f64>>,
}

impl PropertyDef {
    pub fn new(name: impl Into<String>, schema: Schema) -> Self {
        PropertyDef { name: name.into(), schema, range: None, candidates: None }
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.range = Some(Interval::closed(min, max));
        self
    }

    pub fn constraint(&self) -> Option<Constraint> {
        match (&self.range, &self.candidates) {
            (Some(r), _) => Some(Constraint::Range(*r)),
            (None, Some(c)) => Some(Constraint::Candidates(c.clone())),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationshipDef {
    pub name: String,
    pub target: String,
    #[serde(default)]
    pub properties: Vec<PropertyDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDef {
    pub name: String,
    pub interface: String,
}

/// A parsed model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInterface {
    pub id: String,
    #[serde(default)]
    pub properties: Vec<PropertyDef>,
    #[serde(default)]
    pub relationships: Vec<RelationshipDef>,
    #[serde(default)]
    pub components: Vec<ComponentDef>,
}

impl ModelInterface {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn relationship(&self, name: &str) -> Option<&RelationshipDef> {
        self.relationships.iter().find(|r| r.name == name)
    }

    /// Checks everything that does not need other interfaces.
    fn check_local(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::Semantic { model: self.id.clone(), reason });
        if self.id.trim().is_empty() {
            return fail("empty model id".into());
        }
        let mut names = HashSet::new();
        for p in &self.properties {
            check_property(p).or_else(fail)?;
            if !names.insert(p.name.as_str()) {
                return fail(format!("duplicate name {:?}", p.name));
            }
        }
        for r in &self.relationships {
            check_name(&r.name).or_else(fail)?;
            if !names.insert(r.name.as_str()) {
                return fail(format!("duplicate name {:?}", r.name));
            }
            let mut payload = HashSet::new();
            for p in &r.properties {
                check_property(p).or_else(fail)?;
                if !payload.insert(p.name.as_str()) {
                    return fail(format!("duplicate property {:?} on relationship {}", p.name, r.name));
                }
            }
        }
        for c in &self.components {
            check_name(&c.name).or_else(fail)?;
            if !names.insert(c.name.as_str()) {
                return fail(format!("duplicate name {:?}", c.name));
            }
        }
        Ok(())
    }
}

fn check_name(name: &str) -> Result<(), String> {
    if name.is_empty() || name.contains('.') || name.trim() != name {
        return Err(format!("invalid name {name:?}"));
    }
    Ok(())
}

fn check_property(p: &PropertyDef) -> Result<(), String> {
    check_name(&p.name)?;
    if p.range.is_some() && p.candidates.is_some() {
        return Err(format!("{}: range and candidates are exclusive", p.name));
    }
    if p.schema == Schema::GeoPoint && (p.range.is_some() || p.candidates.is_some()) {
        return Err(format!("{}: geospatial properties take no range", p.name));
    }
    if let Some(r) = &p.range {
        let bounds = [r.min, r.max];
        if bounds.iter().flatten().any(|b| !b.is_finite()) {
            return Err(format!("{}: non-finite bound", p.name));
        }
        if let (Some(lo), Some(hi)) = (r.min, r.max) {
            if lo > hi {
                return Err(format!("{}: inverted range {lo}-{hi}", p.name));
            }
        }
    }
    if let Some(c) = &p.candidates {
        if c.is_empty() || c.iter().any(|v| !v.is_finite()) {
            return Err(format!("{}: candidates must be non-empty and finite", p.name));
        }
    }
    Ok(())
}

/// Parses one model document. Components must refer to interfaces already
/// known to `registry`; since registered interfaces are acyclic, the only
/// cycle a new document can introduce is a reference to itself.
pub fn parse_model(text: &str, registry: &ModelRegistry) -> Result<ModelInterface, ModelError> {
    let model: ModelInterface =
        serde_json::from_str(text).map_err(|e| ModelError::Syntax(e.to_string()))?;
    model.check_local()?;
    for c in &model.components {
        if c.interface == model.id {
            return Err(ModelError::Semantic {
                model: model.id.clone(),
                reason: format!("component {} forms a cycle", c.name),
            });
        }
        if registry.get(&c.interface).is_none() {
            return Err(ModelError::Semantic {
                model: model.id.clone(),
                reason: format!("unresolved component interface {}", c.interface),
            });
        }
    }
    Ok(model)
}

/// One addressable leaf property of a model, with components flattened.
#[derive(Debug, Clone)]
pub struct SlotDef {
    pub path: Arc<str>,
    pub schema: Schema,
    pub constraint: Option<Constraint>,
}

/// A model with its components expanded into flat, indexed property slots.
#[derive(Debug)]
pub struct ResolvedModel {
    pub interface: Arc<ModelInterface>,
    pub slots: Vec<SlotDef>,
    index: HashMap<Arc<str>, u32>,
}

impl ResolvedModel {
    pub fn id(&self) -> &str {
        &self.interface.id
    }

    /// `|properties| + Σ parameter_count(component interfaces)`.
    pub fn parameter_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_of(&self, path: &str) -> Option<u32> {
        self.index.get(path).copied()
    }

    pub fn slot(&self, idx: u32) -> &SlotDef {
        &self.slots[idx as usize]
    }
}

/// The set of interfaces known to one engine instance.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<ModelInterface>>,
    resolved: HashMap<String, Arc<ResolvedModel>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &str) -> Option<&Arc<ModelInterface>> {
        self.models.get(id)
    }

    pub fn resolved(&self, id: &str) -> Option<&Arc<ResolvedModel>> {
        self.resolved.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn interfaces(&self) -> impl Iterator<Item = &Arc<ModelInterface>> {
        self.models.values()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Adds a model whose components are already registered. Re-adding an
    /// identical model is a no-op.
    pub fn insert(&mut self, model: ModelInterface) -> Result<Arc<ResolvedModel>, ModelError> {
        if let Some(existing) = self.models.get(&model.id) {
            if **existing == model {
                return Ok(self.resolved[&model.id].clone());
            }
            return Err(ModelError::Semantic {
                model: model.id.clone(),
                reason: "a different model with this id is already registered".into(),
            });
        }
        model.check_local()?;
        let mut slots = Vec::new();
        for p in &model.properties {
            slots.push(SlotDef { path: p.name.as_str().into(), schema: p.schema, constraint: p.constraint() });
        }
        for c in &model.components {
            let inner = self
                .resolved
                .get(&c.interface)
                .ok_or_else(|| ModelError::Semantic {
                    model: model.id.clone(),
                    reason: format!("unresolved component interface {}", c.interface),
                })?;
            for s in &inner.slots {
                slots.push(SlotDef {
                    path: format!("{}.{}", c.name, s.path).into(),
                    schema: s.schema,
                    constraint: s.constraint.clone(),
                });
            }
        }
        let index = slots.iter().enumerate().map(|(i, s)| (s.path.clone(), i as u32)).collect();
        let interface = Arc::new(model);
        let resolved = Arc::new(ResolvedModel { interface: interface.clone(), slots, index });
        self.resolved.insert(interface.id.clone(), resolved.clone());
        self.models.insert(interface.id.clone(), interface);
        Ok(resolved)
    }

    pub fn parse_and_insert(&mut self, text: &str) -> Result<Arc<ResolvedModel>, ModelError> {
        let model = parse_model(text, self)?;
        self.insert(model)
    }
}

/// Why one patch entry was refused.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownPath,
    Type { expected: Schema },
    Range { min: Option<f64>, max: Option<f64> },
    NotACandidate,
    InvalidGeoPoint,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub path: String,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

/// Result of checking a patch against a model: every offending entry is
/// listed, not only the first.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Verdict {
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a value against a slot. `None` (property removal) always passes.
pub fn check_value(slot: &SlotDef, value: Option<&Value>) -> Result<(), ViolationKind> {
    let Some(value) = value else { return Ok(()) };
    let numeric = match (slot.schema, value) {
        (Schema::Integer, Value::Int(v)) => *v as f64,
        (Schema::Float, Value::Int(v)) => *v as f64,
        (Schema::Float, Value::Float(v)) => {
            if !v.is_finite() {
                return Err(ViolationKind::NonFinite);
            }
            *v
        }
        (Schema::GeoPoint, Value::Point(p)) => {
            return if p.is_valid() { Ok(()) } else { Err(ViolationKind::InvalidGeoPoint) };
        }
        (expected, _) => return Err(ViolationKind::Type { expected }),
    };
    match &slot.constraint {
        None => Ok(()),
        Some(Constraint::Range(r)) if r.contains(numeric) => Ok(()),
        Some(Constraint::Range(r)) => Err(ViolationKind::Range { min: r.min, max: r.max }),
        Some(Constraint::Candidates(c)) if c.contains(&numeric) => Ok(()),
        Some(Constraint::Candidates(_)) => Err(ViolationKind::NotACandidate),
    }
}

/// Validates `(path, value)` pairs against a model.
pub fn validate_patch<'a, I>(model: &ResolvedModel, patch: I) -> Verdict
where
    I: IntoIterator<Item = (&'a str, Option<&'a Value>)>,
{
    let mut verdict = Verdict::default();
    for (path, value) in patch {
        let kind = match model.slot_of(path) {
            None => Some(ViolationKind::UnknownPath),
            Some(idx) => check_value(model.slot(idx), value).err(),
        };
        if let Some(kind) = kind {
            verdict.violations.push(Violation { path: path.to_string(), kind });
        }
    }
    verdict
}

pub const CELL_UE_MODEL: &str = "dtmi:twinran:cell:ue;1";
pub const CELL_GNB_MODEL: &str = "dtmi:twinran:cell:gnb;1";
pub const MULTI_UE_MODEL: &str = "dtmi:twinran:multi:ue;1";
pub const MULTI_CELL_MODEL: &str = "dtmi:twinran:multi:cell;1";

/// Number of UE component slots on a multi-instance cell twin.
pub const MULTI_UE_SLOTS: usize = 99;

const CELL_UE_DOC: &str = include_str!("../models/cell_ue.json");
const CELL_GNB_DOC: &str = include_str!("../models/cell_gnb.json");
const MULTI_UE_DOC: &str = include_str!("../models/multi_ue.json");
const MULTI_CELL_DOC: &str = include_str!("../models/multi_cell.json");

/// The shipped interfaces for the network-wide and per-cell graphs.
#[derive(Debug, Clone)]
pub struct BuiltinModels {
    pub multi_gnb: Arc<ResolvedModel>,
    pub multi_ue: Arc<ResolvedModel>,
    pub cell_gnb: Arc<ResolvedModel>,
    pub cell_ue: Arc<ResolvedModel>,
}

impl BuiltinModels {
    /// Documents needed by a multi-graph instance, in upload order.
    pub fn multi_documents() -> [&'static str; 2] {
        [MULTI_UE_DOC, MULTI_CELL_DOC]
    }

    /// Documents needed by a per-cell instance, in upload order.
    pub fn cell_documents() -> [&'static str; 2] {
        [CELL_UE_DOC, CELL_GNB_DOC]
    }
}

pub fn builtin_models() -> BuiltinModels {
    let mut reg = ModelRegistry::new();
    let mut load = |doc: &str| reg.parse_and_insert(doc).expect("builtin model parses");
    let cell_ue = load(CELL_UE_DOC);
    let cell_gnb = load(CELL_GNB_DOC);
    let multi_ue = load(MULTI_UE_DOC);
    let multi_gnb = load(MULTI_CELL_DOC);
    BuiltinModels { multi_gnb, multi_ue, cell_gnb, cell_ue }
}

/// Flat model with `n` float parameters `param_000..`, as used by the
/// latency campaign.
pub fn bench_model(n: usize) -> ModelInterface {
    ModelInterface {
        id: format!("dtmi:twinran:bench:p{n};1"),
        properties: (0..n)
            .map(|i| PropertyDef::new(bench_param(i), Schema::Float).with_range(0.0, 1000.0))
            .collect(),
        relationships: vec![RelationshipDef {
            name: "link".into(),
            target: format!("dtmi:twinran:bench:p{n};1"),
            properties: (0..n)
                .map(|i| PropertyDef::new(bench_param(i), Schema::Float).with_range(0.0, 1000.0))
                .collect(),
        }],
        components: vec![],
    }
}

pub fn bench_param(i: usize) -> String {
    format!("param_{i:03}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::GeoPoint;

    fn builtins() -> BuiltinModels {
        builtin_models()
    }

    #[test]
    fn cell_ue_has_the_ten_table_properties() {
        let m = builtins().cell_ue;
        let names: Vec<&str> = m.slots.iter().map(|s| &*s.path).collect();
        assert_eq!(
            names,
            ["RNTI", "Location", "RSRP", "Buffer", "UL BLER", "UL CQI", "DL BLER", "DL CQI", "UL MCS", "DL MCS"]
        );
        assert_eq!(m.parameter_count(), 10);
    }

    #[test]
    fn builtin_ranges() {
        let b = builtins();
        let tx = b.cell_gnb.slot(b.cell_gnb.slot_of("Tx Power").unwrap());
        assert_eq!(tx.schema, Schema::Float);
        assert_eq!(tx.constraint, Some(Constraint::Range(Interval::closed(20.0, 50.0))));
        let ues = b.cell_gnb.slot(b.cell_gnb.slot_of("Connected UEs").unwrap());
        assert_eq!(ues.constraint, Some(Constraint::Range(Interval::closed(0.0, 99.0))));
        let rsrp = b.cell_ue.slot(b.cell_ue.slot_of("RSRP").unwrap());
        assert_eq!(rsrp.constraint, Some(Constraint::Range(Interval::closed(30.0, 160.0))));
        assert!(b.cell_gnb.interface.relationship("serves").is_some());
    }

    #[test]
    fn multi_cell_shape() {
        let b = builtins();
        assert_eq!(b.multi_gnb.interface.components.len(), 99);
        assert_eq!(b.multi_ue.parameter_count(), 2);
        // 2 own properties + 99 components of (Location, RSRP)
        assert_eq!(b.multi_gnb.parameter_count(), 2 + 99 * 2);
        assert!(b.multi_gnb.slot_of("UE99.RSRP").is_some());
        assert!(b.multi_gnb.slot_of("UE100.RSRP").is_none());
        let rel = b.multi_gnb.interface.relationship("neighbor").unwrap();
        assert_eq!(rel.properties[0].schema, Schema::Float);
        let arfcn = b.multi_gnb.slot(b.multi_gnb.slot_of("ARFCN").unwrap());
        assert_eq!(arfcn.constraint, Some(Constraint::Range(Interval::closed(600000.0, 2016666.0))));
    }

    #[test]
    fn empty_interface_is_valid() {
        let mut reg = ModelRegistry::new();
        let m = reg.parse_and_insert(r#"{"id":"dtmi:x;1","properties":[]}"#).unwrap();
        assert_eq!(m.parameter_count(), 0);
    }

    #[test]
    fn semantic_errors() {
        let reg = ModelRegistry::new();
        let inverted = r#"{"id":"x","properties":[{"name":"CQI","schema":"integer","range":{"min":15,"max":0}}]}"#;
        assert!(matches!(parse_model(inverted, &reg), Err(ModelError::Semantic { .. })));
        let dup = r#"{"id":"x","properties":[{"name":"a","schema":"float"},{"name":"a","schema":"integer"}]}"#;
        assert!(matches!(parse_model(dup, &reg), Err(ModelError::Semantic { .. })));
        let unresolved = r#"{"id":"x","components":[{"name":"c","interface":"nope"}]}"#;
        assert!(matches!(parse_model(unresolved, &reg), Err(ModelError::Semantic { .. })));
        let cyclic = r#"{"id":"x","components":[{"name":"c","interface":"x"}]}"#;
        assert!(matches!(parse_model(cyclic, &reg), Err(ModelError::Semantic { .. })));
        let dotted = r#"{"id":"x","properties":[{"name":"a.b","schema":"float"}]}"#;
        assert!(matches!(parse_model(dotted, &reg), Err(ModelError::Semantic { .. })));
    }

    #[test]
    fn syntax_errors() {
        let reg = ModelRegistry::new();
        assert!(matches!(parse_model("{", &reg), Err(ModelError::Syntax(_))));
        let bad_schema = r#"{"id":"x","properties":[{"name":"a","schema":"string"}]}"#;
        assert!(matches!(parse_model(bad_schema, &reg), Err(ModelError::Syntax(_))));
        let unknown_key = r#"{"id":"x","telemetry":[]}"#;
        assert!(matches!(parse_model(unknown_key, &reg), Err(ModelError::Syntax(_))));
    }

    #[test]
    fn validate_patch_examples() {
        let ue = builtins().cell_ue;
        let ok = Value::Int(15);
        assert!(validate_patch(&ue, [("UL CQI", Some(&ok))]).is_accept());

        let high = Value::Int(16);
        let v = validate_patch(&ue, [("UL CQI", Some(&high))]);
        assert_eq!(v.violations[0].kind, ViolationKind::Range { min: Some(0.0), max: Some(15.0) });

        let frac = Value::Float(3.5);
        let v = validate_patch(&ue, [("Buffer", Some(&frac))]);
        assert_eq!(v.violations[0].kind, ViolationKind::Type { expected: Schema::Integer });
    }

    #[test]
    fn violations_are_reported_per_entry() {
        let ue = builtins().cell_ue;
        let bad_cqi = Value::Int(99);
        let bad_loc = Value::Point(GeoPoint { lat: 91.0, lon: 0.0 });
        let good = Value::Float(0.5);
        let v = validate_patch(
            &ue,
            [("UL CQI", Some(&bad_cqi)), ("UL BLER", Some(&good)), ("Location", Some(&bad_loc)), ("Nope", None)],
        );
        let paths: Vec<&str> = v.violations.iter().map(|v| v.path.as_str()).collect();
        assert_eq!(paths, ["UL CQI", "Location", "Nope"]);
    }

    #[test]
    fn candidates() {
        let mut reg = ModelRegistry::new();
        let m = reg
            .parse_and_insert(r#"{"id":"x","properties":[{"name":"mode","schema":"integer","candidates":[1,2,4]}]}"#)
            .unwrap();
        assert!(validate_patch(&m, [("mode", Some(&Value::Int(4)))]).is_accept());
        assert_eq!(
            validate_patch(&m, [("mode", Some(&Value::Int(3)))]).violations[0].kind,
            ViolationKind::NotACandidate
        );
    }

    #[test]
    fn bench_models_have_requested_size() {
        for n in [25, 50, 100] {
            let mut reg = ModelRegistry::new();
            assert_eq!(reg.insert(bench_model(n)).unwrap().parameter_count(), n);
        }
    }
}

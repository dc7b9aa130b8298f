//! The twin engine: instances hosting models, twins and relationships.
//!
//! Every call carries the simulated time `at` at which it reaches the
//! instance. Calls to one instance must arrive in non-decreasing time; calls
//! to different instances are independent, which is what lets callers drive
//! instances in parallel.

mod instance;
mod rate;
pub mod wire;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latency::LatencyModel;
use crate::model::{ModelError, Verdict};
use crate::time::SimTime;

pub use instance::{
    EventRecord, EventSubject, Instance, InstanceStats, PropertyValue, QueryResult, RelationshipState, TwinState,
};
pub use rate::RateWindow;
pub use wire::{canonical_size, PatchEntry, ReceiptStatus, WireReceipt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateScope {
    Twin,
    Instance,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("instance {0} already exists")]
    DuplicateInstance(String),
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("twin {0} already exists")]
    DuplicateTwin(String),
    #[error("unknown twin {0}")]
    UnknownTwin(String),
    #[error("twin {0} still has relationships")]
    TwinHasRelationships(String),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("validation failed: {0:?}")]
    ValidationFailed(Verdict),
    #[error("rate limit exceeded ({0:?})")]
    RateLimitExceeded(RateScope),
    #[error("payload of {bytes} bytes exceeds {limit}")]
    PayloadTooLarge { bytes: usize, limit: usize },
    #[error("relationship {0} already exists")]
    DuplicateRelationship(String),
    #[error("unknown relationship {0}")]
    UnknownRelationship(String),
    #[error("relationship {0} not defined by the source model")]
    UnknownRelationshipName(String),
    #[error("relationship {relationship} must target {expected}, not {got}")]
    WrongTarget { relationship: String, expected: String, got: String },
    #[error("relationship endpoints live in different instances")]
    CrossInstance,
    #[error("call at {at} precedes the instance clock {clock}")]
    ClockRegression { at: SimTime, clock: SimTime },
}

/// Service limits; defaults are the documented cloud limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceLimits {
    pub max_updates_per_twin_per_second: u32,
    pub max_updates_per_instance_per_second: u32,
    pub max_patch_bytes: usize,
}

impl Default for ServiceLimits {
    fn default() -> Self {
        ServiceLimits {
            max_updates_per_twin_per_second: 10,
            max_updates_per_instance_per_second: 1000,
            max_patch_bytes: 32 * 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Callers supply every timestamp; nothing waits.
    Simulated,
    /// Timestamps follow the wall clock and calls block until their sampled
    /// completion.
    RealTime,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub limits: ServiceLimits,
    pub latency: LatencyModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceHandle(pub(crate) u32);

impl InstanceHandle {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TwinKey(pub(crate) u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelKey(pub(crate) u32);

/// Outcome of an accepted call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReceipt {
    /// When the call returns to the client (for creations: when the twin
    /// becomes visible).
    pub response_time: SimTime,
    /// Sampled service time including any lock wait.
    pub service: Duration,
    /// Sampled propagation lag including any lock wait; zero for calls that
    /// write no properties.
    pub lag: Duration,
    /// Extra delay paid because the twin was busy.
    pub lock_wait: Duration,
}

/// A set of independent instances.
#[derive(Debug, Default)]
pub struct Engine {
    config: EngineConfig,
    instances: Vec<Option<Instance>>,
    by_id: HashMap<Arc<str>, InstanceHandle>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        Engine { config, instances: Vec::new(), by_id: HashMap::new() }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn create_instance(&mut self, id: &str, clock: ClockMode, seed: u64) -> Result<InstanceHandle, EngineError> {
        if self.by_id.contains_key(id) {
            return Err(EngineError::DuplicateInstance(id.to_string()));
        }
        let handle = InstanceHandle(self.instances.len() as u32);
        let inst = Instance::new(id.into(), handle, clock, seed, self.config.clone());
        self.by_id.insert(id.into(), handle);
        self.instances.push(Some(inst));
        Ok(handle)
    }

    /// Removes an instance and everything in it.
    pub fn delete_instance(&mut self, h: InstanceHandle) -> Result<(), EngineError> {
        let inst = self
            .instances
            .get_mut(h.index())
            .and_then(Option::take)
            .ok_or_else(|| EngineError::UnknownInstance(format!("#{}", h.0)))?;
        self.by_id.remove(inst.id());
        Ok(())
    }

    pub fn handle(&self, id: &str) -> Option<InstanceHandle> {
        self.by_id.get(id).copied()
    }

    pub fn instance(&self, h: InstanceHandle) -> Result<&Instance, EngineError> {
        self.instances
            .get(h.index())
            .and_then(Option::as_ref)
            .ok_or_else(|| EngineError::UnknownInstance(format!("#{}", h.0)))
    }

    pub fn instance_mut(&mut self, h: InstanceHandle) -> Result<&mut Instance, EngineError> {
        self.instances
            .get_mut(h.index())
            .and_then(Option::as_mut)
            .ok_or_else(|| EngineError::UnknownInstance(format!("#{}", h.0)))
    }

    pub fn by_id(&self, id: &str) -> Result<&Instance, EngineError> {
        let h = self.handle(id).ok_or_else(|| EngineError::UnknownInstance(id.to_string()))?;
        self.instance(h)
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().flatten()
    }

    /// Live instances as a mutable slice-like view, indexed by handle.
    pub fn slots_mut(&mut self) -> &mut [Option<Instance>] {
        &mut self.instances
    }

    /// Relationship creation across instances is refused; both endpoints
    /// must first be found.
    #[allow(clippy::too_many_arguments)]
    pub fn create_relationship_between(
        &mut self,
        at: SimTime,
        rel_id: &str,
        source: (InstanceHandle, &str),
        target: (InstanceHandle, &str),
        name: &str,
        payload: &[(&str, crate::value::Value)],
    ) -> Result<UpdateReceipt, EngineError> {
        if !self.instance(source.0)?.has_twin(source.1) {
            return Err(EngineError::UnknownTwin(source.1.to_string()));
        }
        if !self.instance(target.0)?.has_twin(target.1) {
            return Err(EngineError::UnknownTwin(target.1.to_string()));
        }
        if source.0 != target.0 {
            return Err(EngineError::CrossInstance);
        }
        self.instance_mut(source.0)?.create_relationship(at, rel_id, source.1, target.1, name, payload)
    }
}

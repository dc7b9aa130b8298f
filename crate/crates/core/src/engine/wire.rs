//! Canonical JSON bodies of the update API.
//!
//! Patches are arrays of `{"path", "sourceTime", "value"}` objects with keys
//! in sorted order and no whitespace; `sourceTime` is integer microseconds
//! since the Unix epoch and a `null` value removes the property. Payload
//! limits are checked against the byte length of exactly this form.

use std::io;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::time::SimTime;
use crate::value::Value;

use super::EngineError;

/// One `(path, value, sourceTime)` triple of a patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEntry {
    pub path: Arc<str>,
    #[serde(rename = "sourceTime", with = "unix_micros")]
    pub source_time: SimTime,
    pub value: Option<Value>,
}

impl PatchEntry {
    pub fn set(path: impl Into<Arc<str>>, value: impl Into<Value>, source_time: SimTime) -> Self {
        PatchEntry { path: path.into(), source_time, value: Some(value.into()) }
    }

    pub fn remove(path: impl Into<Arc<str>>, source_time: SimTime) -> Self {
        PatchEntry { path: path.into(), source_time, value: None }
    }
}

pub(crate) mod unix_micros {
    use super::*;

    pub fn serialize<S: Serializer>(t: &SimTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(t.to_unix_micros())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SimTime, D::Error> {
        let us = u64::deserialize(d)?;
        SimTime::from_unix_micros(us).ok_or_else(|| serde::de::Error::custom("sourceTime before the simulation epoch"))
    }
}

pub(crate) mod opt_unix_micros {
    use super::*;

    pub fn serialize<S: Serializer>(t: &Option<SimTime>, s: S) -> Result<S::Ok, S::Error> {
        match t {
            Some(t) => s.serialize_some(&t.to_unix_micros()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<SimTime>, D::Error> {
        match Option::<u64>::deserialize(d)? {
            None => Ok(None),
            Some(us) => SimTime::from_unix_micros(us)
                .map(Some)
                .ok_or_else(|| serde::de::Error::custom("timestamp before the simulation epoch")),
        }
    }
}

struct Counter(usize);

impl io::Write for Counter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0 += buf.len();
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Length in bytes of the canonical serialization of a patch.
pub fn canonical_size(patch: &[PatchEntry]) -> usize {
    let mut c = Counter(0);
    serde_json::to_writer(&mut c, patch).expect("patch serializes");
    c.0
}

pub fn to_canonical_json(patch: &[PatchEntry]) -> String {
    serde_json::to_string(patch).expect("patch serializes")
}

pub fn parse_patch(body: &str) -> Result<Vec<PatchEntry>, serde_json::Error> {
    serde_json::from_str(body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiptStatus {
    Accepted,
    Rejected,
}

/// Response body of an update call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireReceipt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(rename = "responseTime", with = "opt_unix_micros")]
    pub response_time: Option<SimTime>,
    pub status: ReceiptStatus,
}

impl WireReceipt {
    pub fn from_result(r: &Result<super::UpdateReceipt, EngineError>) -> Self {
        match r {
            Ok(rc) => WireReceipt { error: None, response_time: Some(rc.response_time), status: ReceiptStatus::Accepted },
            Err(e) => WireReceipt { error: Some(e.to_string()), response_time: None, status: ReceiptStatus::Rejected },
        }
    }
}

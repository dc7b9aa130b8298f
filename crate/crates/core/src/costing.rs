//! Usage metering and hourly cost.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeterError {
    #[error("unknown meter kind {0:?}")]
    UnknownKind(String),
    #[error("negative amount {0}")]
    NegativeAmount(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeterKind {
    Messages,
    Operations,
    EventHubMessages,
    QueryUnits,
    FunctionExecutions,
    IngestBytes,
}

impl FromStr for MeterKind {
    type Err = MeterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "messages" => MeterKind::Messages,
            "operations" => MeterKind::Operations,
            "event_hub_messages" => MeterKind::EventHubMessages,
            "query_units" => MeterKind::QueryUnits,
            "function_executions" => MeterKind::FunctionExecutions,
            "ingest_bytes" => MeterKind::IngestBytes,
            other => return Err(MeterError::UnknownKind(other.to_string())),
        })
    }
}

/// Billing counters.
///
/// Engine update calls (twin and relationship patches) are *messages*;
/// queries, creations, deletions and instance management are *operations*;
/// every routed per-property event is one event-hub message.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UsageMeter {
    pub messages: u64,
    pub operations: u64,
    pub event_hub_messages: u64,
    pub query_units: u64,
    pub function_executions: u64,
    pub ingest_bytes: u64,
    pub throughput_units: u32,
    pub data_explorer: bool,
}

impl UsageMeter {
    pub fn record(&mut self, kind: MeterKind, amount: i64) -> Result<(), MeterError> {
        if amount < 0 {
            return Err(MeterError::NegativeAmount(amount));
        }
        let amount = amount as u64;
        match kind {
            MeterKind::Messages => self.messages += amount,
            MeterKind::Operations => self.operations += amount,
            MeterKind::EventHubMessages => self.event_hub_messages += amount,
            MeterKind::QueryUnits => self.query_units += amount,
            MeterKind::FunctionExecutions => self.function_executions += amount,
            MeterKind::IngestBytes => self.ingest_bytes += amount,
        }
        Ok(())
    }

    pub fn record_named(&mut self, kind: &str, amount: i64) -> Result<(), MeterError> {
        self.record(kind.parse()?, amount)
    }

    /// Scales the usage counters of a run of `seconds` to one hour. Fixed
    /// service engagements are left as they are.
    pub fn per_hour(&self, seconds: f64) -> HourlyUsage {
        let k = 3600.0 / seconds;
        HourlyUsage {
            messages: self.messages as f64 * k,
            operations: self.operations as f64 * k,
            event_hub_messages: self.event_hub_messages as f64 * k,
            query_units: self.query_units as f64 * k,
            function_executions: self.function_executions as f64 * k,
            ingest_bytes: self.ingest_bytes as f64 * k,
            throughput_units: self.throughput_units,
            data_explorer: self.data_explorer,
        }
    }
}

impl AddAssign for UsageMeter {
    fn add_assign(&mut self, o: Self) {
        self.messages += o.messages;
        self.operations += o.operations;
        self.event_hub_messages += o.event_hub_messages;
        self.query_units += o.query_units;
        self.function_executions += o.function_executions;
        self.ingest_bytes += o.ingest_bytes;
        self.throughput_units = self.throughput_units.max(o.throughput_units);
        self.data_explorer |= o.data_explorer;
    }
}

impl Add for UsageMeter {
    type Output = UsageMeter;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

/// Usage normalized to one hour.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HourlyUsage {
    pub messages: f64,
    pub operations: f64,
    pub event_hub_messages: f64,
    pub query_units: f64,
    pub function_executions: f64,
    pub ingest_bytes: f64,
    pub throughput_units: u32,
    pub data_explorer: bool,
}

impl Add for HourlyUsage {
    type Output = HourlyUsage;

    fn add(self, o: Self) -> Self {
        HourlyUsage {
            messages: self.messages + o.messages,
            operations: self.operations + o.operations,
            event_hub_messages: self.event_hub_messages + o.event_hub_messages,
            query_units: self.query_units + o.query_units,
            function_executions: self.function_executions + o.function_executions,
            ingest_bytes: self.ingest_bytes + o.ingest_bytes,
            throughput_units: self.throughput_units.max(o.throughput_units),
            data_explorer: self.data_explorer || o.data_explorer,
        }
    }
}

/// Unit prices in US dollars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceTable {
    pub per_million_messages: f64,
    pub per_million_operations: f64,
    pub event_hub_per_throughput_unit_hour: f64,
    pub event_hub_per_million_messages: f64,
    pub data_explorer_per_hour: f64,
    pub per_million_query_units: f64,
    pub per_million_function_executions: f64,
}

impl Default for PriceTable {
    fn default() -> Self {
        PriceTable {
            per_million_messages: 1.0,
            per_million_operations: 2.5,
            event_hub_per_throughput_unit_hour: 0.06,
            event_hub_per_million_messages: 0.03,
            data_explorer_per_hour: 1.5,
            per_million_query_units: 0.50,
            per_million_function_executions: 0.20,
        }
    }
}

impl PriceTable {
    pub fn is_valid(&self) -> bool {
        [
            self.per_million_messages,
            self.per_million_operations,
            self.event_hub_per_throughput_unit_hour,
            self.event_hub_per_million_messages,
            self.data_explorer_per_hour,
            self.per_million_query_units,
            self.per_million_function_executions,
        ]
        .iter()
        .all(|p| p.is_finite() && *p >= 0.0)
    }
}

/// Itemized dollars per hour.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub messages: f64,
    pub operations: f64,
    pub event_hub: f64,
    pub data_explorer: f64,
    pub query_units: f64,
    pub function_executions: f64,
    pub total: f64,
}

impl CostBreakdown {
    /// Engine-only share (messages and operations).
    pub fn base(&self) -> f64 {
        self.messages + self.operations
    }
}

pub fn hourly_cost(usage: &HourlyUsage, prices: &PriceTable) -> CostBreakdown {
    let m = 1e-6;
    let messages = usage.messages * m * prices.per_million_messages;
    let operations = usage.operations * m * prices.per_million_operations;
    let event_hub = if usage.throughput_units > 0 {
        usage.throughput_units as f64 * prices.event_hub_per_throughput_unit_hour
            + usage.event_hub_messages * m * prices.event_hub_per_million_messages
    } else {
        0.0
    };
    let data_explorer = if usage.data_explorer { prices.data_explorer_per_hour } else { 0.0 };
    let query_units = usage.query_units * m * prices.per_million_query_units;
    let function_executions = usage.function_executions * m * prices.per_million_function_executions;
    CostBreakdown {
        messages,
        operations,
        event_hub,
        data_explorer,
        query_units,
        function_executions,
        total: messages + operations + event_hub + data_explorer + query_units + function_executions,
    }
}

impl fmt::Display for CostBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("twin messages", self.messages),
            ("twin operations", self.operations),
            ("event hub", self.event_hub),
            ("data explorer", self.data_explorer),
            ("query units", self.query_units),
            ("function executions", self.function_executions),
        ];
        for (name, v) in rows {
            writeln!(f, "{name:<22}{v:>10.3} $/h")?;
        }
        write!(f, "{:<22}{:>10.3} $/h", "total", self.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn usage(messages: f64, operations: f64) -> HourlyUsage {
        HourlyUsage { messages, operations, ..Default::default() }
    }

    #[test]
    fn base_price() {
        let c = hourly_cost(&usage(30e6, 4e6), &PriceTable::default());
        assert!((c.total - 40.0).abs() < 1e-9);
    }

    #[test]
    fn with_event_hub_and_explorer() {
        let u = HourlyUsage {
            event_hub_messages: 230.4e6,
            throughput_units: 2,
            data_explorer: true,
            ..usage(30e6, 4e6)
        };
        let c = hourly_cost(&u, &PriceTable::default());
        assert!((c.event_hub - 7.032).abs() < 1e-9);
        assert!((c.total - 48.5).abs() <= 0.2, "{}", c.total);
    }

    #[test]
    fn zero_usage_is_free() {
        assert_eq!(hourly_cost(&HourlyUsage::default(), &PriceTable::default()).total, 0.0);
    }

    #[test]
    fn record_and_errors() {
        let mut m = UsageMeter::default();
        m.record(MeterKind::Messages, 1).unwrap();
        assert_eq!(m.messages, 1);
        assert_eq!(m.record(MeterKind::Messages, -1), Err(MeterError::NegativeAmount(-1)));
        assert!(matches!(m.record_named("bogus", 1), Err(MeterError::UnknownKind(_))));
        m.record_named("query_units", 800).unwrap();
        assert_eq!(m.query_units, 800);
    }

    #[test]
    fn linear_in_usage() {
        let p = PriceTable::default();
        let a = HourlyUsage { query_units: 3e6, ..usage(1e6, 2e6) };
        let b = HourlyUsage { function_executions: 5e6, ..usage(7e6, 0.5e6) };
        let sum = hourly_cost(&(a + b), &p).total;
        assert!((sum - hourly_cost(&a, &p).total - hourly_cost(&b, &p).total).abs() < 1e-9);
    }

    #[test]
    fn price_table_json_defaults() {
        let p: PriceTable = serde_json::from_str(r#"{"per_million_messages": 2.0}"#).unwrap();
        assert_eq!(p.per_million_messages, 2.0);
        assert_eq!(p.per_million_operations, 2.5);
        assert!(p.is_valid());
    }
}

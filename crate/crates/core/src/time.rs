//! Simulated time.

use std::fmt;
use std::ops::{Add, Sub};
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Unix time of the simulated clock's origin (2024-01-01T00:00:00Z) in µs.
pub const SIM_EPOCH_UNIX_MICROS: u64 = 1_704_067_200_000_000;

/// A point on the simulated clock, in microseconds since the run origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round().max(0.0) as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    /// Wire representation: microseconds since the Unix epoch.
    pub const fn to_unix_micros(self) -> u64 {
        self.0 + SIM_EPOCH_UNIX_MICROS
    }

    pub fn from_unix_micros(us: u64) -> Option<Self> {
        us.checked_sub(SIM_EPOCH_UNIX_MICROS).map(SimTime)
    }

    /// Elapsed time since `earlier`, saturating at zero.
    pub fn since(self, earlier: SimTime) -> Duration {
        Duration::from_micros(self.0.saturating_sub(earlier.0))
    }

    pub fn saturating_sub(self, d: Duration) -> SimTime {
        SimTime(self.0.saturating_sub(d.as_micros() as u64))
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: Duration) -> SimTime {
        SimTime(self.0 + rhs.as_micros() as u64)
    }
}

impl Sub for SimTime {
    type Output = Duration;

    fn sub(self, rhs: SimTime) -> Duration {
        self.since(rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

/// Duration in fractional milliseconds, the unit every report uses.
pub fn millis(d: Duration) -> f64 {
    d.as_micros() as f64 / 1e3
}

/// Millisecond quantity rounded to the microsecond grid of the clock.
pub fn from_millis_f64(ms: f64) -> Duration {
    Duration::from_micros((ms * 1e3).round().max(0.0) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_round_trip() {
        let t = SimTime::from_millis(5_250);
        assert_eq!(SimTime::from_unix_micros(t.to_unix_micros()), Some(t));
        assert_eq!(SimTime::from_unix_micros(3), None);
    }

    #[test]
    fn arithmetic() {
        let t = SimTime::from_millis(10) + from_millis_f64(2.5);
        assert_eq!(t.as_micros(), 12_500);
        assert_eq!(millis(t - SimTime::from_millis(10)), 2.5);
        assert_eq!(SimTime::ZERO.since(t), Duration::ZERO);
    }
}

//! Sliding one-second admission windows.

use std::time::Duration;

use crate::time::SimTime;

const WINDOW: Duration = Duration::from_secs(1);

/// Admits at most `limit` events in any half-open window `(t - 1 s, t]`.
///
/// Keeps the last `limit` admission times in a ring; a new admission at `t`
/// is allowed iff fewer than `limit` are stored or the oldest stored one is
/// at least a second old.
#[derive(Debug, Clone)]
pub struct RateWindow {
    ring: Vec<SimTime>,
    head: usize,
    limit: usize,
}

impl RateWindow {
    pub fn new(limit: u32) -> Self {
        RateWindow { ring: Vec::with_capacity(limit.min(1024) as usize), head: 0, limit: limit as usize }
    }

    pub fn allows(&self, now: SimTime) -> bool {
        if self.ring.len() < self.limit {
            return true;
        }
        self.limit > 0 && self.ring[self.head] + WINDOW <= now
    }

    pub fn admit(&mut self, now: SimTime) {
        if self.ring.len() < self.limit {
            self.ring.push(now);
        } else if self.limit > 0 {
            self.ring[self.head] = now;
            self.head = (self.head + 1) % self.limit;
        }
    }

    /// Admissions inside `(now - 1 s, now]`.
    pub fn count_in_window(&self, now: SimTime) -> usize {
        self.ring.iter().filter(|&&t| t + WINDOW > now && t <= now).count()
    }
}

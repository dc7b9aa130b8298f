//! Calibrated latency laws of the twin engine.
//!
//! Every latency is `floor + E` where `E` is log-normal, truncated at
//! `cap - floor` by resampling. `mu` is solved numerically so that the
//! truncated mean of `E` equals the configured mean minus the floor. Where the
//! linear mean formula touches the floor the excess is held at
//! `min_excess_ms`, otherwise the law would degenerate to a constant. Far
//! outside the calibrated sizes the excess saturates at half the band
//! between floor and cap.

use std::collections::HashMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::time::from_millis_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyKind {
    /// Update call: `responseTime - sourceTime`.
    Service,
    /// Property propagation: `lastUpdatedTime - arrival`.
    Lag,
    Query,
    Create,
    /// Event-route hop between instances.
    Route,
}

/// `base + per_model·(m − model_ref) + per_update·(u − update_ref)` in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearMean {
    pub base_ms: f64,
    pub per_model_ms: f64,
    pub per_update_ms: f64,
    pub model_ref: f64,
    pub update_ref: f64,
}

impl LinearMean {
    pub fn at(&self, model_params: usize, update_params: usize) -> f64 {
        self.base_ms
            + self.per_model_ms * (model_params as f64 - self.model_ref)
            + self.per_update_ms * (update_params as f64 - self.update_ref)
    }
}

/// Shifted, capped log-normal law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailLaw {
    pub mean: LinearMean,
    pub floor_ms: f64,
    pub cap_ms: f64,
    pub sigma: f64,
    pub min_excess_ms: f64,
}

impl TailLaw {
    /// Target mean of the excess over the floor.
    pub fn excess_mean(&self, m: usize, u: usize) -> f64 {
        let top = 0.5 * (self.cap_ms - self.floor_ms);
        (self.mean.at(m, u) - self.floor_ms).max(self.min_excess_ms).min(top)
    }

    /// Mean of the full law (floor + truncated excess).
    pub fn mean_ms(&self, m: usize, u: usize) -> f64 {
        self.floor_ms + self.excess_mean(m, u)
    }

    /// Solves `mu` for the truncated log-normal excess.
    pub fn solve_mu(&self, m: usize, u: usize) -> f64 {
        let target = self.excess_mean(m, u);
        let cap = self.cap_ms - self.floor_ms;
        assert!(target > 0.0 && target < cap, "excess mean {target} outside (0, {cap})");
        let s = self.sigma;
        let ln_c = cap.ln();
        let truncated_mean = |mu: f64| {
            let num = normal_cdf((ln_c - mu - s * s) / s);
            let den = normal_cdf((ln_c - mu) / s);
            (mu + s * s / 2.0).exp() * num / den
        };
        // truncated_mean is increasing in mu
        let (mut lo, mut hi) = (target.ln() - 10.0 * s - 10.0, ln_c + 10.0 * s);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if truncated_mean(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// The engine's latency configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub service: TailLaw,
    pub lag: TailLaw,
    pub query: TailLaw,
    pub route: TailLaw,
    pub lock_penalty_ms: f64,
    pub relationship_surcharge_ms: f64,
    pub create_min_ms: f64,
    pub create_max_ms: f64,
    /// Model sizes mapped onto the bottom and top of the creation band.
    pub create_model_span: (usize, usize),
    pub bulk_create_per_s: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            service: TailLaw {
                mean: LinearMean { base_ms: 45.0, per_model_ms: 0.28, per_update_ms: 0.28, model_ref: 25.0, update_ref: 10.0 },
                floor_ms: 45.0,
                cap_ms: 200.0,
                sigma: 0.5,
                min_excess_ms: 0.5,
            },
            lag: TailLaw {
                mean: LinearMean { base_ms: 9.0, per_model_ms: 0.0, per_update_ms: 0.28, model_ref: 25.0, update_ref: 10.0 },
                floor_ms: 9.0,
                cap_ms: 100.0,
                sigma: 0.5,
                min_excess_ms: 1.0,
            },
            query: TailLaw {
                mean: LinearMean { base_ms: 60.0, per_model_ms: 0.4, per_update_ms: 0.0, model_ref: 25.0, update_ref: 0.0 },
                floor_ms: 60.0,
                cap_ms: 250.0,
                sigma: 0.5,
                min_excess_ms: 0.5,
            },
            route: TailLaw {
                mean: LinearMean { base_ms: 120.0, per_model_ms: 0.0, per_update_ms: 0.0, model_ref: 0.0, update_ref: 0.0 },
                floor_ms: 40.0,
                cap_ms: 540.0,
                sigma: 0.6,
                min_excess_ms: 1.0,
            },
            lock_penalty_ms: 45.0,
            relationship_surcharge_ms: 10.0,
            create_min_ms: 1000.0,
            create_max_ms: 2000.0,
            create_model_span: (25, 100),
            bulk_create_per_s: 200.0,
        }
    }
}

impl LatencyModel {
    pub fn law(&self, kind: LatencyKind) -> Option<&TailLaw> {
        match kind {
            LatencyKind::Service => Some(&self.service),
            LatencyKind::Lag => Some(&self.lag),
            LatencyKind::Query => Some(&self.query),
            LatencyKind::Route => Some(&self.route),
            LatencyKind::Create => None,
        }
    }

    /// Lower edge of the creation window for a model of `m` parameters; the
    /// window is half the band wide and slides up linearly with model size.
    pub fn create_window_ms(&self, m: usize) -> (f64, f64) {
        let (lo_m, hi_m) = self.create_model_span;
        let frac = ((m as f64 - lo_m as f64) / (hi_m as f64 - lo_m as f64)).clamp(0.0, 1.0);
        let half = (self.create_max_ms - self.create_min_ms) / 2.0;
        let start = self.create_min_ms + half * frac;
        (start, start + half)
    }

    pub fn lock_penalty(&self) -> Duration {
        from_millis_f64(self.lock_penalty_ms)
    }

    pub fn relationship_surcharge(&self) -> Duration {
        from_millis_f64(self.relationship_surcharge_ms)
    }

    /// Spacing between admitted creations under the bulk cap.
    pub fn create_spacing(&self) -> Duration {
        Duration::from_micros((1e6 / self.bulk_create_per_s).round() as u64)
    }
}

/// Words of keystream reserved per draw; resampling beyond this reads into
/// the next draw's block, which stays deterministic.
const WORDS_PER_DRAW: u128 = 64;

/// Counter-addressed sampler: the `i`-th draw depends only on
/// `(seed, stream, i)` and the requested law.
#[derive(Debug, Clone)]
pub struct LatencySampler {
    model: LatencyModel,
    rng: ChaCha8Rng,
    next: u64,
    mu: HashMap<(LatencyKind, usize, usize), f64>,
}

impl LatencySampler {
    pub fn new(model: LatencyModel, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        LatencySampler { model, rng, next: 0, mu: HashMap::new() }
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    pub fn draw_index(&self) -> u64 {
        self.next
    }

    /// Next draw of `kind` for model size `m` and update size `u`.
    pub fn sample(&mut self, kind: LatencyKind, m: usize, u: usize) -> Duration {
        let idx = self.next;
        self.next += 1;
        self.sample_at(idx, kind, m, u)
    }

    /// The draw at a given index, without moving the sequence.
    pub fn sample_at(&mut self, index: u64, kind: LatencyKind, m: usize, u: usize) -> Duration {
        self.rng.set_word_pos(index as u128 * WORDS_PER_DRAW);
        let ms = match self.model.law(kind).copied() {
            None => {
                let (lo, hi) = self.model.create_window_ms(m);
                lo + (hi - lo) * self.rng.random::<f64>()
            }
            Some(law) => {
                let mu = *self.mu.entry((kind, m, u)).or_insert_with(|| law.solve_mu(m, u));
                let cap = law.cap_ms - law.floor_ms;
                let excess = loop {
                    let z: f64 = self.rng.sample(StandardNormal);
                    let e = (mu + law.sigma * z).exp();
                    if e <= cap {
                        break e;
                    }
                };
                law.floor_ms + excess
            }
        };
        from_millis_f64(ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::millis;

    fn mean_of(s: &mut LatencySampler, kind: LatencyKind, m: usize, u: usize, n: usize) -> (f64, f64, f64) {
        let xs: Vec<f64> = (0..n).map(|_| millis(s.sample(kind, m, u))).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = xs.iter().cloned().fold(0.0, f64::max);
        (mean, min, max)
    }

    #[test]
    fn service_mean_at_smallest_configuration() {
        let mut s = LatencySampler::new(LatencyModel::default(), 1, 0);
        let (mean, min, max) = mean_of(&mut s, LatencyKind::Service, 25, 10, 10_000);
        assert!((mean - 45.0).abs() <= 2.0, "{mean}");
        assert!(min >= 45.0 && max <= 200.0);
    }

    #[test]
    fn lag_never_exceeds_cap() {
        let mut s = LatencySampler::new(LatencyModel::default(), 2, 0);
        let (mean, min, max) = mean_of(&mut s, LatencyKind::Lag, 100, 100, 10_000);
        assert!(max <= 100.0 && min >= 9.0);
        assert!((mean - (9.0 + 0.28 * 90.0)).abs() < 0.5, "{mean}");
    }

    #[test]
    fn truncated_mean_solver_matches_monte_carlo() {
        // σ large enough that the cap truncates a visible share of the mass
        let law = TailLaw { sigma: 1.2, ..LatencyModel::default().service };
        let mu = law.solve_mu(100, 100);
        let cap = law.cap_ms - law.floor_ms;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut sum, mut n) = (0.0, 0usize);
        while n < 400_000 {
            let z: f64 = rng.sample(StandardNormal);
            let e = (mu + law.sigma * z).exp();
            if e <= cap {
                sum += e;
                n += 1;
            }
        }
        let target = law.excess_mean(100, 100);
        assert!((sum / n as f64 - target).abs() / target < 0.01);
    }

    #[test]
    fn far_outside_calibration_saturates() {
        let mut s = LatencySampler::new(LatencyModel::default(), 4, 0);
        let (mean, _, max) = mean_of(&mut s, LatencyKind::Service, 1000, 1000, 10_000);
        assert!(max <= 200.0);
        assert!((mean - 122.5).abs() < 1.5, "{mean}");
    }

    #[test]
    fn same_index_same_value() {
        let model = LatencyModel::default();
        let mut a = LatencySampler::new(model.clone(), 7, 3);
        let mut b = LatencySampler::new(model, 7, 3);
        let seq: Vec<_> = (0..50).map(|_| a.sample(LatencyKind::Lag, 50, 25)).collect();
        assert_eq!(b.sample_at(17, LatencyKind::Lag, 50, 25), seq[17]);
        assert_eq!(b.sample_at(17, LatencyKind::Lag, 50, 25), seq[17]);
    }

    #[test]
    fn creation_window_slides_with_model_size() {
        let model = LatencyModel::default();
        assert_eq!(model.create_window_ms(25), (1000.0, 1500.0));
        assert_eq!(model.create_window_ms(100), (1500.0, 2000.0));
        assert_eq!(model.create_window_ms(400), (1500.0, 2000.0));
        let mut s = LatencySampler::new(model, 4, 0);
        for _ in 0..1000 {
            let d = millis(s.sample(LatencyKind::Create, 10, 0));
            assert!((1000.0..=1500.0).contains(&d));
        }
    }

    #[test]
    fn cdf_sanity() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
    }
}

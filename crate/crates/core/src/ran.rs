//! Emulated radio access network with an E2-like telemetry interface.
//!
//! Cells sit on a grid; UEs move by random waypoint and measure every cell
//! through a log-distance pathloss law. Subscribed cells emit periodic KPM
//! report indications and immediate insert indications for attach, detach
//! and handover events.

use std::collections::BTreeSet;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MULTI_UE_SLOTS;
use crate::time::SimTime;
use crate::value::GeoPoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RanError {
    #[error("{requested} UEs per cell exceed the {max} UE slots of a cell")]
    CapacityExceeded { requested: usize, max: usize },
    #[error("a network needs at least one cell")]
    NoCells,
    #[error("unknown cell {0}")]
    UnknownCell(u32),
    #[error("unknown UE {0}")]
    UnknownUe(u32),
    #[error("granularity must be positive")]
    NonPositiveGranularity,
    #[error("step must be positive")]
    NonPositiveStep,
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
}

/// Scenario description, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub cells: usize,
    pub ues_per_cell: usize,
    /// Side of the square service area, metres.
    pub area_m: f64,
    pub speed_mps: f64,
    pub granularity_s: f64,
    pub seed: u64,
    pub hysteresis_db: f64,
    pub time_to_trigger_s: f64,
    pub max_pause_s: f64,
    /// Share of UEs that never move.
    pub stationary_fraction: f64,
    pub tx_power_dbm: f64,
    pub plmn: i64,
    pub base_arfcn: i64,
    /// Measurement and KPM noise; off gives a deterministic radio.
    pub noise: bool,
    pub rsrp_noise_db: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            cells: 8,
            ues_per_cell: 99,
            area_m: 1414.0,
            speed_mps: 1.5,
            granularity_s: 0.01,
            seed: 7,
            hysteresis_db: 3.0,
            time_to_trigger_s: 0.1,
            max_pause_s: 5.0,
            stationary_fraction: 0.0,
            tx_power_dbm: 43.0,
            plmn: 1010,
            base_arfcn: 632_628,
            noise: true,
            rsrp_noise_db: 3.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), RanError> {
        if self.cells == 0 {
            return Err(RanError::NoCells);
        }
        if self.ues_per_cell > MULTI_UE_SLOTS {
            return Err(RanError::CapacityExceeded { requested: self.ues_per_cell, max: MULTI_UE_SLOTS });
        }
        if !(self.granularity_s > 0.0) {
            return Err(RanError::NonPositiveGranularity);
        }
        let bad = |m: &str| Err(RanError::InvalidConfig(m.to_string()));
        if !(self.area_m > 0.0) {
            return bad("area_m must be positive");
        }
        if self.speed_mps < 0.0 || self.max_pause_s < 0.0 || self.hysteresis_db < 0.0 || self.time_to_trigger_s < 0.0 {
            return bad("speed, pause, hysteresis and time-to-trigger must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.stationary_fraction) {
            return bad("stationary_fraction must lie in [0, 1]");
        }
        if !(20.0..=50.0).contains(&self.tx_power_dbm) {
            return bad("tx_power_dbm must lie in [20, 50]");
        }
        if self.plmn < 1 {
            return bad("plmn must be positive");
        }
        let top = self.base_arfcn + self.cells as i64 - 1;
        if self.base_arfcn < 600_000 || top > 2_016_666 {
            return bad("ARFCNs must lie in [600000, 2016666]");
        }
        Ok(())
    }
}

/// Pathloss in dB at `d` metres: `40 + 30·log10(d / 1 m)`, distances below
/// 1 m clamped.
pub fn pathloss_db(d: f64) -> f64 {
    40.0 + 30.0 * d.max(1.0).log10()
}

/// Received power (dBm) onto the reporting scale [30, 160].
pub fn rsrp_scale(rx_dbm: f64) -> f64 {
    (rx_dbm + 180.0).clamp(30.0, 160.0)
}

const MCS_FROM_CQI: [i64; 16] = [0, 0, 2, 4, 6, 8, 11, 13, 15, 18, 20, 22, 24, 26, 27, 28];
const UPLINK_OFFSET: f64 = 10.0;
const ORIGIN: GeoPoint = GeoPoint { lat: 48.137, lon: 11.575 };

/// About 3 dB per CQI step over the usable part of the scale.
pub fn cqi_from_rsrp(scale: f64) -> i64 {
    ((scale - 85.0) / 3.0).round().clamp(0.0, 15.0) as i64
}

pub fn mcs_from_cqi(cqi: i64) -> i64 {
    MCS_FROM_CQI[cqi.clamp(0, 15) as usize]
}

pub fn bler_from_rsrp(scale: f64) -> f64 {
    0.5 / (1.0 + ((scale - 100.0) / 8.0).exp())
}

fn gauss(rng: &mut ChaCha8Rng, on: bool, sigma: f64) -> f64 {
    if on {
        sigma * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    }
}

/// Power of a unit-mean Rayleigh channel in dB.
fn fading_db(rng: &mut ChaCha8Rng, on: bool) -> f64 {
    if !on {
        return 0.0;
    }
    let u: f64 = rng.random();
    10.0 * (-(1.0 - u).ln()).max(1e-6).log10()
}

/// Rounds onto the 1/1024 grid so that window sums stay exact in `f64`.
pub fn quantize_bler(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 1024.0).round() / 1024.0
}

/// Local metres to WGS-84 around a fixed origin.
pub fn to_geo(pos: [f64; 2]) -> GeoPoint {
    let lat = ORIGIN.lat + pos[1] / 111_320.0;
    let lon = ORIGIN.lon + pos[0] / (111_320.0 * ORIGIN.lat.to_radians().cos());
    // keep the point on a 1e-7 degree grid for compact, stable JSON
    GeoPoint { lat: (lat * 1e7).round() / 1e7, lon: (lon * 1e7).round() / 1e7 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub id: u32,
    pub plmn: i64,
    pub arfcn: i64,
    pub tx_power_dbm: f64,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeState {
    pub index: u32,
    pub rnti: i64,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub waypoint: [f64; 2],
    pub pause_left_s: f64,
    pub mobile: bool,
    pub serving: u32,
    /// Large-scale received power from every cell, dBm.
    pub rx_dbm: Vec<f64>,
    pub buffer: i64,
    a3: Option<(u32, SimTime)>,
}

/// KPM metrics a subscription can ask for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rnti,
    Location,
    Rsrp,
    Buffer,
    UlBler,
    UlCqi,
    DlBler,
    DlCqi,
    UlMcs,
    DlMcs,
    TxPower,
    ConnectedUes,
}

impl Metric {
    pub const ALL: [Metric; 12] = [
        Metric::Rnti,
        Metric::Location,
        Metric::Rsrp,
        Metric::Buffer,
        Metric::UlBler,
        Metric::UlCqi,
        Metric::DlBler,
        Metric::DlCqi,
        Metric::UlMcs,
        Metric::DlMcs,
        Metric::TxPower,
        Metric::ConnectedUes,
    ];

    /// Twin property that carries this metric.
    pub fn property(self) -> &'static str {
        match self {
            Metric::Rnti => "RNTI",
            Metric::Location => "Location",
            Metric::Rsrp => "RSRP",
            Metric::Buffer => "Buffer",
            Metric::UlBler => "UL BLER",
            Metric::UlCqi => "UL CQI",
            Metric::DlBler => "DL BLER",
            Metric::DlCqi => "DL CQI",
            Metric::UlMcs => "UL MCS",
            Metric::DlMcs => "DL MCS",
            Metric::TxPower => "Tx Power",
            Metric::ConnectedUes => "Connected UEs",
        }
    }

    pub fn is_cell_level(self) -> bool {
        matches!(self, Metric::TxPower | Metric::ConnectedUes)
    }
}

/// Per-UE metrics of one report; absent fields were not subscribed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UeMetrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rnti: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub location: Option<GeoPoint>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rsrp: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub buffer: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ul_bler: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ul_cqi: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dl_bler: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dl_cqi: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ul_mcs: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dl_mcs: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UeReport {
    pub ue: u32,
    pub metrics: UeMetrics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tx_power: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub connected_ues: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum InsertEvent {
    Attach { ue: u32, rnti: i64 },
    Detach { ue: u32, rnti: i64 },
    HandoverNeeded { ue: u32, rnti: i64, source: u32, target: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Report { ues: Vec<UeReport>, cell: CellMetrics },
    Insert(InsertEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicationReport {
    pub cell: u32,
    pub subscription: Option<u32>,
    pub granularity_s: f64,
    /// Emission time, Unix µs.
    #[serde(with = "crate::engine::wire::unix_micros")]
    pub emitted_at: SimTime,
    pub payload: Payload,
}

impl IndicationReport {
    pub fn is_report(&self) -> bool {
        matches!(self.payload, Payload::Report { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub id: u32,
    pub cell: u32,
    pub functions: BTreeSet<Metric>,
    pub granularity_s: f64,
    #[serde(skip)]
    period: Duration,
    #[serde(skip)]
    next_due: SimTime,
}

/// E2 setup descriptor of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupInfo {
    pub cell_id: u32,
    pub plmn: i64,
    pub arfcn: i64,
    pub tx_power_dbm: f64,
    pub position: [f64; 2],
    /// Adjacent cells, as carried in the setup's neighbour relation table.
    pub neighbors: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: ScenarioConfig,
    cells: Vec<CellState>,
    rows: usize,
    cols: usize,
    ues: Vec<UeState>,
    clock: SimTime,
    mobility: ChaCha8Rng,
    noise: ChaCha8Rng,
    traffic: ChaCha8Rng,
    subs: Vec<Subscription>,
    inserts: Vec<IndicationReport>,
    handovers: u64,
}

impl Network {
    /// Builds the topology: cells at the centres of a `rows × cols` grid
    /// (`rows = ⌊√M⌋`), `N` UEs placed uniformly in each cell's tile.
    pub fn new(config: ScenarioConfig) -> Result<Self, RanError> {
        config.validate()?;
        let m = config.cells;
        let rows = (m as f64).sqrt().floor() as usize;
        let cols = m.div_ceil(rows);
        let (w, h) = (config.area_m / cols as f64, config.area_m / rows as f64);
        let cells: Vec<CellState> = (0..m)
            .map(|i| CellState {
                id: i as u32 + 1,
                plmn: config.plmn,
                arfcn: config.base_arfcn + i as i64,
                tx_power_dbm: config.tx_power_dbm,
                position: [((i % cols) as f64 + 0.5) * w, ((i / cols) as f64 + 0.5) * h],
            })
            .collect();
        let mut mobility = ChaCha8Rng::seed_from_u64(config.seed);
        mobility.set_stream(1);
        let mut noise = ChaCha8Rng::seed_from_u64(config.seed);
        noise.set_stream(2);
        let mut traffic = ChaCha8Rng::seed_from_u64(config.seed);
        traffic.set_stream(3);

        let mut ues = Vec::with_capacity(m * config.ues_per_cell);
        for (ci, cell) in cells.iter().enumerate() {
            let (x0, y0) = ((ci % cols) as f64 * w, (ci / cols) as f64 * h);
            for _ in 0..config.ues_per_cell {
                let index = ues.len() as u32;
                let pos = [x0 + w * mobility.random::<f64>(), y0 + h * mobility.random::<f64>()];
                let mobile = mobility.random::<f64>() >= config.stationary_fraction;
                ues.push(UeState {
                    index,
                    rnti: index as i64 % 1000,
                    position: pos,
                    velocity: [0.0, 0.0],
                    waypoint: pos,
                    pause_left_s: 0.0,
                    mobile,
                    serving: cell.id,
                    rx_dbm: Vec::new(),
                    buffer: traffic.random_range(0..=255),
                    a3: None,
                });
            }
        }
        let mut net = Network {
            config,
            cells,
            rows,
            cols,
            ues,
            clock: SimTime::ZERO,
            mobility,
            noise,
            traffic,
            subs: Vec::new(),
            inserts: Vec::new(),
            handovers: 0,
        };
        for i in 0..net.ues.len() {
            net.measure(i);
        }
        Ok(net)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    /// Moves the clock of a fresh network to `t`, so that it can join a
    /// deployment that is already running.
    pub fn set_start(&mut self, t: SimTime) -> Result<(), RanError> {
        if !self.subs.is_empty() || self.handovers > 0 || self.clock != SimTime::ZERO {
            return Err(RanError::InvalidConfig("the start time can only be set on a fresh network".into()));
        }
        self.clock = t;
        Ok(())
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn cells(&self) -> &[CellState] {
        &self.cells
    }

    pub fn ues(&self) -> &[UeState] {
        &self.ues
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn handovers(&self) -> u64 {
        self.handovers
    }

    fn cell_index(&self, id: u32) -> Result<usize, RanError> {
        let i = id as usize;
        if i == 0 || i > self.cells.len() {
            return Err(RanError::UnknownCell(id));
        }
        Ok(i - 1)
    }

    pub fn cell(&self, id: u32) -> Result<&CellState, RanError> {
        self.cell_index(id).map(|i| &self.cells[i])
    }

    fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    fn measure(&mut self, i: usize) {
        let pos = self.ues[i].position;
        let rx: Vec<f64> = self.cells.iter().map(|c| c.tx_power_dbm - pathloss_db(Self::distance(pos, c.position))).collect();
        self.ues[i].rx_dbm = rx;
    }

    /// Large-scale received power of `cell` at `ue`, dBm.
    pub fn rx_dbm(&self, ue: u32, cell: u32) -> Result<f64, RanError> {
        let c = self.cell_index(cell)?;
        let u = self.ues.get(ue as usize).ok_or(RanError::UnknownUe(ue))?;
        Ok(u.rx_dbm[c])
    }

    /// Cells adjacent on the grid (8-neighbourhood).
    pub fn neighbors(&self, cell: u32) -> Result<Vec<u32>, RanError> {
        let i = self.cell_index(cell)?;
        let (r, c) = ((i / self.cols) as i64, (i % self.cols) as i64);
        let mut out = Vec::new();
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nc >= self.cols as i64 {
                    continue;
                }
                let j = (nr * self.cols as i64 + nc) as usize;
                if j < self.cells.len() {
                    out.push(j as u32 + 1);
                }
            }
        }
        Ok(out)
    }

    /// Power received at cell `at` from cell `from`, dBm.
    pub fn neighbor_power_dbm(&self, at: u32, from: u32) -> Result<f64, RanError> {
        let (a, b) = (&self.cells[self.cell_index(at)?], &self.cells[self.cell_index(from)?]);
        Ok(b.tx_power_dbm - pathloss_db(Self::distance(a.position, b.position)))
    }

    pub fn attached(&self, cell: u32) -> usize {
        self.ues.iter().filter(|u| u.serving == cell).count()
    }

    /// Serving cell of every UE, by UE index.
    pub fn attachment(&self) -> Vec<u32> {
        self.ues.iter().map(|u| u.serving).collect()
    }

    pub fn e2_setup(&self, cell: u32) -> Result<SetupInfo, RanError> {
        let c = self.cell(cell)?;
        Ok(SetupInfo {
            cell_id: c.id,
            plmn: c.plmn,
            arfcn: c.arfcn,
            tx_power_dbm: c.tx_power_dbm,
            position: c.position,
            neighbors: self.neighbors(cell)?,
        })
    }

    pub fn subscribe(&mut self, cell: u32, functions: BTreeSet<Metric>, granularity_s: f64) -> Result<Subscription, RanError> {
        self.cell_index(cell)?;
        if !(granularity_s > 0.0) {
            return Err(RanError::NonPositiveGranularity);
        }
        let period = Duration::from_micros((granularity_s * 1e6).round() as u64);
        let sub = Subscription {
            id: self.subs.len() as u32,
            cell,
            functions,
            granularity_s,
            period,
            next_due: self.clock + period,
        };
        self.subs.push(sub.clone());
        Ok(sub)
    }

    pub fn set_position(&mut self, ue: u32, pos: [f64; 2]) -> Result<(), RanError> {
        let u = self.ues.get_mut(ue as usize).ok_or(RanError::UnknownUe(ue))?;
        u.position = pos;
        u.waypoint = pos;
        u.velocity = [0.0, 0.0];
        u.a3 = None;
        self.measure(ue as usize);
        Ok(())
    }

    pub fn set_mobile(&mut self, ue: u32, mobile: bool) -> Result<(), RanError> {
        self.ues.get_mut(ue as usize).ok_or(RanError::UnknownUe(ue))?.mobile = mobile;
        Ok(())
    }

    fn move_ue(&mut self, i: usize, dt: f64) {
        let (speed, area, max_pause) = (self.config.speed_mps, self.config.area_m, self.config.max_pause_s);
        let rng = &mut self.mobility;
        let u = &mut self.ues[i];
        if !u.mobile || speed == 0.0 {
            return;
        }
        let mut left = dt;
        while left > 0.0 {
            if u.pause_left_s > 0.0 {
                let p = u.pause_left_s.min(left);
                u.pause_left_s -= p;
                left -= p;
                continue;
            }
            let to = [u.waypoint[0] - u.position[0], u.waypoint[1] - u.position[1]];
            let dist = (to[0] * to[0] + to[1] * to[1]).sqrt();
            if dist < 1e-9 {
                u.waypoint = [area * rng.random::<f64>(), area * rng.random::<f64>()];
                u.pause_left_s = max_pause * rng.random::<f64>();
                continue;
            }
            let travel = speed * left;
            if travel >= dist {
                u.position = u.waypoint;
                left -= dist / speed;
                u.velocity = [0.0, 0.0];
            } else {
                u.velocity = [to[0] / dist * speed, to[1] / dist * speed];
                u.position = [u.position[0] + u.velocity[0] * left, u.position[1] + u.velocity[1] * left];
                left = 0.0;
            }
        }
    }

    fn traffic(&mut self, i: usize, dt: f64) {
        // birth-death with equal rates, reflected at the buffer bounds
        let k = (200.0 * dt).round().max(1.0) as i64;
        let born = self.traffic.random_range(0..=k);
        let served = self.traffic.random_range(0..=k);
        let u = &mut self.ues[i];
        u.buffer = (u.buffer + born - served).clamp(0, 255);
    }

    /// Advances mobility, radio and traffic by `dt`, then evaluates handovers.
    pub fn step(&mut self, dt: Duration) -> Result<(), RanError> {
        if dt.is_zero() {
            return Err(RanError::NonPositiveStep);
        }
        self.clock = self.clock + dt;
        let secs = dt.as_secs_f64();
        for i in 0..self.ues.len() {
            self.move_ue(i, secs);
            self.measure(i);
            self.traffic(i, secs);
        }
        for i in 0..self.ues.len() as u32 {
            self.check_handover(i);
        }
        Ok(())
    }

    /// Best neighbour that beats the serving cell by more than the hysteresis.
    fn a3_candidate(&self, ue: &UeState) -> Option<u32> {
        let s = ue.serving as usize - 1;
        let serving = ue.rx_dbm[s];
        let (best, power) = ue
            .rx_dbm
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != s)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
        (*power > serving + self.config.hysteresis_db).then_some(best as u32 + 1)
    }

    /// A3 handover check: when the best neighbour has beaten the serving cell
    /// by more than the hysteresis for the time-to-trigger, and the target has
    /// a free UE slot, the UE is handed over and an insert indication is
    /// queued for the source cell and returned.
    pub fn check_handover(&mut self, ue: u32) -> Option<IndicationReport> {
        let now = self.clock;
        let i = ue as usize;
        let cand = self.a3_candidate(self.ues.get(i)?);
        let ttt = Duration::from_secs_f64(self.config.time_to_trigger_s);
        let u = &mut self.ues[i];
        let target = match (cand, u.a3) {
            (None, _) => {
                u.a3 = None;
                return None;
            }
            (Some(c), Some((t, since))) if c == t && now.since(since) >= ttt => c,
            (Some(c), Some((t, _))) if c == t => return None,
            (Some(c), _) => {
                u.a3 = Some((c, now));
                if !ttt.is_zero() {
                    return None;
                }
                c
            }
        };
        if self.attached(target) >= MULTI_UE_SLOTS {
            return None;
        }
        self.execute_handover(ue, target)
    }

    /// Moves a UE to `target` now, without the A3 rule. Used to script
    /// handovers.
    pub fn force_handover(&mut self, ue: u32, target: u32) -> Result<Option<IndicationReport>, RanError> {
        self.cell_index(target)?;
        let u = self.ues.get(ue as usize).ok_or(RanError::UnknownUe(ue))?;
        if u.serving == target || self.attached(target) >= MULTI_UE_SLOTS {
            return Ok(None);
        }
        Ok(self.execute_handover(ue, target))
    }

    fn execute_handover(&mut self, ue: u32, target: u32) -> Option<IndicationReport> {
        let u = &mut self.ues[ue as usize];
        let source = u.serving;
        u.serving = target;
        u.a3 = None;
        let rnti = u.rnti;
        self.handovers += 1;
        let ind = IndicationReport {
            cell: source,
            subscription: None,
            granularity_s: 0.0,
            emitted_at: self.clock,
            payload: Payload::Insert(InsertEvent::HandoverNeeded { ue, rnti, source, target }),
        };
        if self.subs.iter().any(|s| s.cell == source) {
            self.inserts.push(ind.clone());
        }
        Some(ind)
    }

    fn ue_metrics(&mut self, i: usize, functions: &BTreeSet<Metric>) -> UeMetrics {
        let noisy = self.config.noise;
        let sigma = self.config.rsrp_noise_db;
        let u = &self.ues[i];
        let rx = u.rx_dbm[u.serving as usize - 1];
        let (rnti, pos, buffer) = (u.rnti, u.position, u.buffer);
        let rng = &mut self.noise;
        let dl = rsrp_scale(rx + gauss(rng, noisy, sigma));
        let ul = rsrp_scale(rx - UPLINK_OFFSET + gauss(rng, noisy, sigma));
        // link quality sees per-report Rayleigh fading on top of the measurement
        let dl_q = dl + fading_db(rng, noisy);
        let ul_q = ul + fading_db(rng, noisy);
        let dl_cqi = cqi_from_rsrp(dl_q);
        let ul_cqi = cqi_from_rsrp(ul_q);
        let dl_bler = quantize_bler(bler_from_rsrp(dl_q));
        let ul_bler = quantize_bler(bler_from_rsrp(ul_q));
        let has = |m: Metric| functions.contains(&m);
        UeMetrics {
            rnti: has(Metric::Rnti).then_some(rnti),
            location: has(Metric::Location).then(|| to_geo(pos)),
            rsrp: has(Metric::Rsrp).then_some(dl.round() as i64),
            buffer: has(Metric::Buffer).then_some(buffer),
            ul_bler: has(Metric::UlBler).then_some(ul_bler),
            ul_cqi: has(Metric::UlCqi).then_some(ul_cqi),
            dl_bler: has(Metric::DlBler).then_some(dl_bler),
            dl_cqi: has(Metric::DlCqi).then_some(dl_cqi),
            ul_mcs: has(Metric::UlMcs).then_some(mcs_from_cqi(ul_cqi)),
            dl_mcs: has(Metric::DlMcs).then_some(mcs_from_cqi(dl_cqi)),
        }
    }

    fn report(&mut self, sub: usize, at: SimTime) -> IndicationReport {
        let (cell, functions, granularity_s, id) = {
            let s = &self.subs[sub];
            (s.cell, s.functions.clone(), s.granularity_s, s.id)
        };
        let members: Vec<usize> = (0..self.ues.len()).filter(|&i| self.ues[i].serving == cell).collect();
        let ue_level = functions.iter().any(|m| !m.is_cell_level());
        let ues = if ue_level {
            members.iter().map(|&i| UeReport { ue: i as u32, metrics: self.ue_metrics(i, &functions) }).collect()
        } else {
            Vec::new()
        };
        let c = &self.cells[cell as usize - 1];
        let cell_metrics = CellMetrics {
            tx_power: functions.contains(&Metric::TxPower).then_some(c.tx_power_dbm),
            connected_ues: functions.contains(&Metric::ConnectedUes).then_some(members.len() as i64),
        };
        IndicationReport { cell, subscription: Some(id), granularity_s, emitted_at: at, payload: Payload::Report { ues, cell: cell_metrics } }
    }

    /// Every indication due at or before `now`, in time order: the queued
    /// inserts and one report per elapsed granularity period per subscription.
    /// Reports describe the network state as of the latest step.
    pub fn poll_indications(&mut self, now: SimTime) -> Vec<IndicationReport> {
        let mut due: Vec<(SimTime, usize)> = Vec::new();
        for (k, s) in self.subs.iter_mut().enumerate() {
            while s.next_due <= now {
                due.push((s.next_due, k));
                s.next_due = s.next_due + s.period;
            }
        }
        due.sort();
        let mut out: Vec<IndicationReport> = std::mem::take(&mut self.inserts);
        for (at, k) in due {
            let r = self.report(k, at);
            out.push(r);
        }
        // inserts first among equal timestamps: they describe the step itself
        out.sort_by_key(|r| (r.emitted_at, r.is_report()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(cells: usize, ues: usize) -> ScenarioConfig {
        ScenarioConfig { cells, ues_per_cell: ues, noise: false, ..ScenarioConfig::default() }
    }

    #[test]
    fn topology_and_capacity() {
        let net = Network::new(ScenarioConfig { cells: 8, ues_per_cell: 99, area_m: 1414.0, seed: 7, ..Default::default() }).unwrap();
        assert_eq!(net.cells().len(), 8);
        assert_eq!(net.ues().len(), 792);
        assert_eq!(net.grid(), (2, 4));
        let idle = Network::new(quiet(1, 0)).unwrap();
        assert_eq!(idle.ues().len(), 0);
        assert_eq!(
            Network::new(quiet(1, 100)).unwrap_err(),
            RanError::CapacityExceeded { requested: 100, max: 99 }
        );
    }

    #[test]
    fn setup_is_idempotent() {
        let net = Network::new(quiet(3, 1)).unwrap();
        let ids: BTreeSet<u32> = (1..=3).map(|c| net.e2_setup(c).unwrap().cell_id).collect();
        assert_eq!(ids.len(), 3);
        assert_eq!(net.e2_setup(2), net.e2_setup(2));
        assert_eq!(net.e2_setup(4), Err(RanError::UnknownCell(4)));
    }

    #[test]
    fn periodic_reports() {
        let mut net = Network::new(quiet(1, 3)).unwrap();
        net.subscribe(1, [Metric::Rsrp, Metric::DlCqi].into(), 0.01).unwrap();
        let mut n = 0;
        for _ in 0..10 {
            net.step(Duration::from_millis(100)).unwrap();
            for r in net.poll_indications(net.clock()) {
                let Payload::Report { ues, .. } = &r.payload else { panic!("no inserts in one cell") };
                assert_eq!(ues.len(), 3);
                assert!(ues.iter().all(|u| u.metrics.buffer.is_none() && u.metrics.rsrp.is_some()));
                n += 1;
            }
        }
        assert_eq!(n, 100);
        assert_eq!(net.subscribe(1, [Metric::Rsrp].into(), 0.0), Err(RanError::NonPositiveGranularity));
    }

    #[test]
    fn single_cell_never_hands_over() {
        let mut net = Network::new(ScenarioConfig { cells: 1, ues_per_cell: 20, speed_mps: 20.0, ..Default::default() }).unwrap();
        for _ in 0..200 {
            net.step(Duration::from_millis(100)).unwrap();
        }
        assert_eq!(net.handovers(), 0);
    }

    #[test]
    fn midway_tie_stays_with_serving_cell() {
        let mut net = Network::new(ScenarioConfig { hysteresis_db: 0.0, time_to_trigger_s: 0.0, ..quiet(2, 1) }).unwrap();
        let (a, b) = (net.cells()[0].position, net.cells()[1].position);
        net.set_position(0, [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]).unwrap();
        net.set_mobile(0, false).unwrap();
        assert!(net.check_handover(0).is_none());
        net.step(Duration::from_millis(100)).unwrap();
        assert_eq!(net.ues()[0].serving, 1);
    }

    #[test]
    fn metric_mappings_stay_in_range() {
        for s in [0.0, 30.0, 60.0, 90.0, 160.0, 400.0] {
            let cqi = cqi_from_rsrp(rsrp_scale(s - 180.0));
            assert!((0..=15).contains(&cqi));
            assert!((0..=28).contains(&mcs_from_cqi(cqi)));
            let b = quantize_bler(bler_from_rsrp(s));
            assert!((0.0..=1.0).contains(&b) && (b * 1024.0).fract() == 0.0);
        }
    }
}

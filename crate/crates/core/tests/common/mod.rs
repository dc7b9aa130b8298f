//! Oracles shared by the xApp tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinran::engine::{Engine, EngineConfig};
use twinran::model::MULTI_UE_SLOTS;
use twinran::ran::{IndicationReport, InsertEvent, Metric, Payload, ScenarioConfig};
use twinran::scenario::Deployment;
use twinran::xapp::{ue_twin_id, XappConfig};
use twinran::{SimTime, Value};

pub fn deployment(scenario: ScenarioConfig, record: bool) -> Deployment {
    let xapp = XappConfig { granularity_s: scenario.granularity_s, record_dispatches: record, ..XappConfig::default() };
    let mut d = Deployment::new(Engine::new(EngineConfig::default()), scenario, xapp).unwrap();
    d.start(SimTime::ZERO).unwrap();
    d
}

pub struct WindowRun {
    /// Dispatches with at least one entry.
    pub dispatched: u64,
    pub entries: u64,
    /// Most common number of samples per reduced window.
    pub mode_window: usize,
    pub busiest_instance_rate: u32,
}

/// Independent model of what the bridge should send: per twin, the raw
/// samples since the previous dispatch slot, reduced with exact arithmetic.
#[derive(Default)]
pub struct Oracle {
    windows: HashMap<(u32, Arc<str>), TwinWindow>,
    pub checked_entries: u64,
    pub window_sizes: BTreeMap<usize, u64>,
}

#[derive(Default)]
struct TwinWindow {
    samples: BTreeMap<String, Vec<Value>>,
    last: BTreeMap<String, Value>,
}

fn latest_value(path: &str) -> bool {
    matches!(path, "RNTI" | "Location" | "Connected UEs")
}

impl Oracle {
    pub fn ingest(&mut self, r: &IndicationReport) {
        match &r.payload {
            Payload::Insert(InsertEvent::HandoverNeeded { ue, source, target, .. }) => {
                let id: Arc<str> = ue_twin_id(*ue).into();
                self.windows.remove(&(*source, id.clone()));
                self.windows.insert((*target, id), TwinWindow::default());
            }
            Payload::Insert(_) => {}
            Payload::Report { ues, cell } => {
                let gnb = self.windows.entry((r.cell, format!("gnb-{}", r.cell).into())).or_default();
                if let Some(p) = cell.tx_power {
                    gnb.samples.entry("Tx Power".into()).or_default().push(Value::Float(p));
                }
                if let Some(n) = cell.connected_ues {
                    gnb.samples.entry("Connected UEs".into()).or_default().push(Value::Int(n));
                }
                for u in ues {
                    let w = self.windows.entry((r.cell, ue_twin_id(u.ue).into())).or_default();
                    let m = u.metrics;
                    let pairs: [(&str, Option<Value>); 10] = [
                        ("RNTI", m.rnti.map(Value::Int)),
                        ("Location", m.location.map(Value::Point)),
                        ("RSRP", m.rsrp.map(Value::Int)),
                        ("Buffer", m.buffer.map(Value::Int)),
                        ("UL BLER", m.ul_bler.map(Value::Float)),
                        ("UL CQI", m.ul_cqi.map(Value::Int)),
                        ("DL BLER", m.dl_bler.map(Value::Float)),
                        ("DL CQI", m.dl_cqi.map(Value::Int)),
                        ("UL MCS", m.ul_mcs.map(Value::Int)),
                        ("DL MCS", m.dl_mcs.map(Value::Int)),
                    ];
                    for (p, v) in pairs {
                        if let Some(v) = v {
                            w.samples.entry(p.into()).or_default().push(v);
                        }
                    }
                }
            }
        }
    }

    /// Expected entries of a dispatch, in the twin's property order.
    pub fn expect(&mut self, cell: u32, twin: &Arc<str>, order: &[&str]) -> Vec<(String, Value)> {
        let w = self.windows.entry((cell, twin.clone())).or_default();
        let mut out = Vec::new();
        for &path in order {
            let Some(s) = w.samples.get(path).filter(|s| !s.is_empty()) else { continue };
            *self.window_sizes.entry(s.len()).or_default() += 1;
            let value = if latest_value(path) {
                *s.last().unwrap()
            } else {
                match s[0] {
                    Value::Int(_) => {
                        let sum: i64 = s.iter().map(|v| if let Value::Int(i) = v { *i } else { unreachable!() }).sum();
                        // half away from zero, which is half up for these non-negative metrics
                        Value::Int(Ratio::new(sum, s.len() as i64).round().to_integer())
                    }
                    Value::Float(_) => {
                        // samples sit on the 1/1024 grid: keep exact integer numerators
                        let num: i64 = s
                            .iter()
                            .map(|v| if let Value::Float(f) = v { (f * 1024.0) as i64 } else { unreachable!() })
                            .sum();
                        let den = 1024 * s.len() as i64;
                        let exact = Ratio::new(num, den);
                        let f = num as f64 / den as f64;
                        if num > 0 {
                            assert_nearest(f, exact);
                        }
                        Value::Float(f)
                    }
                    Value::Point(_) => unreachable!(),
                }
            };
            if w.last.get(path) != Some(&value) {
                out.push((path.to_string(), value));
                w.last.insert(path.to_string(), value);
            }
        }
        w.samples.clear();
        out
    }
}

/// Exact value of a positive double below 2 with a moderate exponent.
fn exact_ratio(x: f64) -> Ratio<i128> {
    if x == 0.0 {
        return Ratio::from_integer(0);
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1u64 << 52) - 1)) as i128;
    let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1 << 52), exp - 1075) };
    assert!(x > 0.0 && (-126..=0).contains(&e), "{x}");
    Ratio::new(mant, 1i128 << -e)
}

/// `f` is the double closest to `exact`.
fn assert_nearest(f: f64, exact: Ratio<i64>) {
    let r = |x: f64| exact_ratio(x);
    let e = Ratio::new(*exact.numer() as i128, *exact.denom() as i128);
    let abs = |x: Ratio<i128>| if x < Ratio::from_integer(0) { -x } else { x };
    let err = abs(r(f) - e);
    assert!(err <= abs(r(f.next_up()) - e) && err <= abs(r(f.next_down()) - e));
}

pub const UE_ORDER: [&str; 10] = ["RNTI", "Location", "RSRP", "Buffer", "UL BLER", "UL CQI", "DL BLER", "DL CQI", "UL MCS", "DL MCS"];
pub const GNB_ORDER: [&str; 2] = ["Tx Power", "Connected UEs"];

/// Runs a seeded deployment for `secs` and checks every cell-instance
/// dispatch against [`Oracle`] and the pacing counters against the limits.
pub fn check_window_oracle(seed: u64, secs: f64) -> WindowRun {
    let mut d = deployment(ScenarioConfig { seed, ..ScenarioConfig::default() }, true);
    let mut oracle = Oracle::default();
    let mut batch = Vec::new();
    let mut dispatched = 0u64;
    while d.now() < SimTime::from_secs_f64(secs) {
        d.step(&mut |r| batch.push(r.clone())).unwrap();
        // within a step the bridge ticks before it ingests
        for rec in d.bridge.take_dispatches() {
            if !rec.cell_instance {
                continue;
            }
            let order: &[&str] = if rec.twin.starts_with("gnb-") { &GNB_ORDER } else { &UE_ORDER };
            let expected = oracle.expect(rec.cell, &rec.twin, order);
            let got: Vec<(String, Value)> = rec.entries.iter().map(|(p, v)| (p.to_string(), v.expect("no removals on cell twins"))).collect();
            assert_eq!(got, expected, "{} in cell {} at {:?}", rec.twin, rec.cell, rec.at);
            oracle.checked_entries += got.len() as u64;
            dispatched += u64::from(!got.is_empty());
        }
        for r in batch.drain(..) {
            oracle.ingest(&r);
        }
    }
    assert_eq!(d.bridge.stats().implicit_moves, 0);
    for inst in d.engine.instances() {
        let st = inst.stats();
        assert_eq!(st.rate_limited, 0, "{}", inst.id());
        assert!(st.peak_twin_rate <= 10, "{} {}", inst.id(), st.peak_twin_rate);
        assert!(st.peak_instance_rate <= 1000, "{} {}", inst.id(), st.peak_instance_rate);
    }
    let busiest = d.engine.instances().map(|i| i.stats().peak_instance_rate).max().unwrap();
    let (&mode, _) = oracle.window_sizes.iter().max_by_key(|(_, n)| **n).unwrap();
    WindowRun { dispatched, entries: oracle.checked_entries, mode_window: mode, busiest_instance_rate: busiest }
}

pub fn attached_counts(d: &Deployment) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for c in d.network.attachment() {
        *m.entry(c).or_default() += 1;
    }
    m
}

/// Forces 50 seeded handovers on 4 cells of 20 UEs, waits for quiescence
/// and compares the bridge's books and both twin graphs with the emulator.
pub fn check_fifty_handovers(seed: u64) {
    let cfg = ScenarioConfig { cells: 4, ues_per_cell: 20, hysteresis_db: 1e3, granularity_s: 0.1, seed, ..ScenarioConfig::default() };
    let mut d = deployment(cfg, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(47));
    let mut done = 0;
    while done < 50 {
        d.run_until(d.now() + Duration::from_millis(300), &mut |_| {}).unwrap();
        let ue = rng.random_range(0..80u32);
        let target = rng.random_range(1..=4u32);
        if d.network.force_handover(ue, target).unwrap().is_some() {
            done += 1;
        }
    }
    d.run_until(d.now() + Duration::from_millis(300), &mut |_| {}).unwrap();
    assert!(d.settle(Duration::from_secs(10)).unwrap());
    d.run_until(d.now() + Duration::from_millis(500), &mut |_| {}).unwrap();
    assert!(d.bridge.is_quiescent());

    let truth: BTreeMap<u32, u32> = d.network.attachment().into_iter().enumerate().map(|(u, c)| (u as u32, c)).collect();
    assert_eq!(d.bridge.attachment(), truth);
    assert_eq!(d.bridge.stats().handovers, 50);

    // one UE twin and one serving relationship per UE across the cell instances
    let mut twins: BTreeMap<String, usize> = BTreeMap::new();
    let mut serves: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for c in 1..=4u32 {
        let inst = d.engine.instance(d.bridge.cell_instance(c).unwrap()).unwrap();
        for id in inst.twin_ids().filter(|t| t.starts_with("ue-")) {
            *twins.entry(id.to_string()).or_default() += 1;
        }
        for r in inst.relationships() {
            assert_eq!(r.name, "serves");
            serves.entry(r.target.clone()).or_default().push(c);
        }
    }
    assert_eq!(twins.len(), 80);
    assert!(twins.values().all(|&n| n == 1));
    for (u, &c) in &truth {
        assert_eq!(serves.get(&ue_twin_id(*u)), Some(&vec![c]));
    }

    // one occupied component slot per UE, in the serving cell's twin
    let multi = d.engine.instance(d.bridge.multi_instance().unwrap()).unwrap();
    let counts = attached_counts(&d);
    for c in 1..=4u32 {
        let occupied = (1..=MULTI_UE_SLOTS).filter(|k| multi.property(&format!("cell-{c}"), &format!("UE{k}.Location")).is_some()).count();
        assert_eq!(occupied, counts.get(&c).copied().unwrap_or(0), "cell {c}");
    }
    for (&u, &c) in &truth {
        let (cell, k) = d.bridge.multi_slot(u).unwrap();
        assert_eq!(cell, c);
        assert!(multi.property(&format!("cell-{c}"), &format!("UE{}.{}", k + 1, Metric::Location.property())).is_some());
    }
}

use std::time::Duration;

use proptest::prelude::*;
use twinran::engine::{
    canonical_size, ClockMode, Engine, EngineConfig, EngineError, Instance, PatchEntry, RateScope,
};
use twinran::model::{bench_model, bench_param, builtin_models, BuiltinModels, CELL_GNB_MODEL, CELL_UE_MODEL};
use twinran::stats::{ks_test, summary};
use twinran::time::millis;
use twinran::{SimTime, Value};

fn engine() -> Engine {
    Engine::new(EngineConfig::default())
}

fn ms(t: u64) -> SimTime {
    SimTime::from_millis(t)
}

/// Instance with the bench model of `n` parameters and `twins` twins,
/// all visible by t = 10 s.
fn bench_instance(e: &mut Engine, n: usize, twins: usize, seed: u64) -> &mut Instance {
    let h = e.create_instance(&format!("bench-{n}-{seed}"), ClockMode::Simulated, seed).unwrap();
    let inst = e.instance_mut(h).unwrap();
    let model = inst.add_model(SimTime::ZERO, bench_model(n)).unwrap();
    for i in 0..twins {
        inst.create_twin(SimTime::ZERO, &format!("t{i}"), model.id(), &[]).unwrap();
    }
    inst
}

fn full_patch(u: usize, at: SimTime) -> Vec<PatchEntry> {
    (0..u).map(|i| PatchEntry::set(bench_param(i), (i % 1000) as f64, at)).collect()
}

#[test]
fn instances_are_unique_and_independent() {
    let mut e = engine();
    let h = e.create_instance("cell-1", ClockMode::Simulated, 7).unwrap();
    assert_eq!(e.instance(h).unwrap().twin_count(), 0);
    assert_eq!(e.create_instance("cell-1", ClockMode::Simulated, 7), Err(EngineError::DuplicateInstance("cell-1".into())));

    // nine instances each take 1000 updates in the same second
    let mut e = engine();
    let handles: Vec<_> = (0..9).map(|i| e.create_instance(&format!("i{i}"), ClockMode::Simulated, i).unwrap()).collect();
    for &h in &handles {
        let inst = e.instance_mut(h).unwrap();
        inst.add_model(SimTime::ZERO, bench_model(1)).unwrap();
        for t in 0..100 {
            inst.create_twin(SimTime::ZERO, &format!("t{t}"), &bench_model(1).id, &[]).unwrap();
        }
    }
    let start = SimTime::from_secs_f64(10.0);
    for &h in &handles {
        let inst = e.instance_mut(h).unwrap();
        for k in 0..1000u64 {
            let at = start + Duration::from_micros(k * 999);
            inst.update_twin(at, &format!("t{}", k % 100), &full_patch(1, at)).unwrap();
        }
    }
    for &h in &handles {
        assert_eq!(e.instance(h).unwrap().stats().updates_accepted, 1000);
    }
}

#[test]
fn creation_is_visible_between_one_and_two_seconds() {
    let mut e = engine();
    let h = e.create_instance("c", ClockMode::Simulated, 1).unwrap();
    let inst = e.instance_mut(h).unwrap();
    inst.upload_models(SimTime::ZERO, &BuiltinModels::cell_documents()).unwrap();
    let r = inst.create_twin(SimTime::ZERO, "ue-5", CELL_UE_MODEL, &[("RNTI", Value::Int(5))]).unwrap();
    let wait = millis(r.response_time.since(SimTime::ZERO));
    assert!((1000.0..=2000.0).contains(&wait), "{wait}");
    let before = r.response_time.saturating_sub(Duration::from_micros(1));
    assert!(!inst.is_visible("ue-5", before));
    assert!(matches!(inst.query_twin(before, "ue-5"), Err(EngineError::UnknownTwin(_))));
    assert!(inst.query_twin(r.response_time, "ue-5").is_ok());

    let bad = inst.create_twin(r.response_time, "ue-6", CELL_UE_MODEL, &[("UL CQI", Value::Int(16))]);
    assert!(matches!(bad, Err(EngineError::ValidationFailed(_))));
    assert_eq!(
        inst.create_twin(r.response_time, "ue-5", CELL_UE_MODEL, &[]),
        Err(EngineError::DuplicateTwin("ue-5".into()))
    );
    assert!(matches!(inst.create_twin(r.response_time, "x", "dtmi:nope;1", &[]), Err(EngineError::UnknownModel(_))));
}

#[test]
fn bulk_creation_is_throughput_bound() {
    let mut e = engine();
    let inst = bench_instance(&mut e, 25, 0, 3);
    let model = bench_model(25).id;
    let mut last = SimTime::ZERO;
    for i in 0..100 {
        last = last.max(inst.create_twin(SimTime::ZERO, &format!("b{i}"), &model, &[]).unwrap().response_time);
    }
    // oracle: 99 spacings of 1/200 s plus at most the 1.5 s window top for m = 25
    let bound = 99.0 * 5.0 + 1500.0;
    let done = last.as_millis_f64();
    assert!(done <= bound && done >= 99.0 * 5.0 + 1000.0, "{done}");
}

#[test]
fn accepted_update_receipt_and_lag_invariants() {
    let mut e = engine();
    let inst = bench_instance(&mut e, 100, 1, 5);
    let at = SimTime::from_secs_f64(10.0);
    let patch = full_patch(100, at);
    let size = canonical_size(&patch);
    assert!((6000..=6600).contains(&size), "{size}");
    let r = inst.update_twin(at, "t0", &patch).unwrap();
    assert_eq!(r.response_time.since(at), r.service);
    for i in 0..100 {
        let p = inst.property("t0", &bench_param(i)).unwrap();
        assert_eq!(p.last_updated.since(at), r.lag);
        assert_eq!(p.source_time, Some(at));
    }
    assert!(millis(r.service) <= 200.0 && millis(r.lag) <= 100.0);
}

#[test]
fn eleventh_update_within_a_second_is_rejected() {
    let mut e = engine();
    let inst = bench_instance(&mut e, 25, 2, 9);
    let start = SimTime::from_secs_f64(10.0);
    for k in 0..10 {
        let at = start + Duration::from_millis(90 * k);
        inst.update_twin(at, "t0", &full_patch(1, at)).unwrap();
    }
    let at = start + Duration::from_millis(950);
    assert_eq!(inst.update_twin(at, "t0", &full_patch(1, at)), Err(EngineError::RateLimitExceeded(RateScope::Twin)));
    // another twin is not blocked
    assert!(inst.update_twin(at, "t1", &full_patch(1, at)).is_ok());
}

#[test]
fn thousand_and_first_instance_update_is_rejected() {
    let mut e = engine();
    let inst = bench_instance(&mut e, 1, 101, 11);
    let start = SimTime::from_secs_f64(10.0);
    for k in 0..1000u64 {
        let at = start + Duration::from_micros(k * 900);
        inst.update_twin(at, &format!("t{}", k % 100), &full_patch(1, at)).unwrap();
    }
    let at = start + Duration::from_micros(999_000);
    assert_eq!(inst.update_twin(at, "t100", &full_patch(1, at)), Err(EngineError::RateLimitExceeded(RateScope::Instance)));
    assert_eq!(inst.stats().peak_instance_rate, 1000);
}

#[test]
fn oversized_patch_is_rejected_and_twin_unchanged() {
    let mut e = engine();
    let h = e.create_instance("big", ClockMode::Simulated, 2).unwrap();
    let inst = e.instance_mut(h).unwrap();
    inst.add_model(SimTime::ZERO, bench_model(600)).unwrap();
    inst.create_twin(SimTime::ZERO, "t", &bench_model(600).id, &[]).unwrap();
    let at = SimTime::from_secs_f64(10.0);
    let patch = full_patch(600, at);
    let bytes = canonical_size(&patch);
    assert!(bytes > 32768);
    assert_eq!(inst.update_twin(at, "t", &patch), Err(EngineError::PayloadTooLarge { bytes, limit: 32768 }));
    assert!(inst.property("t", &bench_param(0)).is_none());
    assert_eq!(inst.stats().events_emitted, 1); // the creation only
}

#[test]
fn relationship_lifecycle() {
    let mut e = engine();
    let a = e.create_instance("a", ClockMode::Simulated, 1).unwrap();
    let b = e.create_instance("b", ClockMode::Simulated, 2).unwrap();
    for h in [a, b] {
        let inst = e.instance_mut(h).unwrap();
        inst.upload_models(SimTime::ZERO, &BuiltinModels::cell_documents()).unwrap();
        inst.create_twin(SimTime::ZERO, "gnb", CELL_GNB_MODEL, &[]).unwrap();
        inst.create_twin(SimTime::ZERO, "ue", CELL_UE_MODEL, &[]).unwrap();
    }
    let at = ms(5000);
    let r = e
        .create_relationship_between(at, "gnb-ue", (a, "gnb"), (a, "ue"), "serves", &[("RNTI", Value::Int(3))])
        .unwrap();
    assert!(r.service >= Duration::from_millis(55)); // service floor + surcharge
    let inst = e.instance_mut(a).unwrap();
    let gnb = inst.query_twin(ms(5100), "gnb").unwrap().value;
    assert_eq!(gnb.relationships.len(), 1);
    assert_eq!(gnb.relationships[0].target, "ue");
    assert!(matches!(inst.delete_twin(ms(5200), "ue"), Err(EngineError::TwinHasRelationships(_))));
    inst.delete_relationship(ms(5300), "gnb-ue").unwrap();
    assert!(inst.relationship_state("gnb-ue").is_none());
    assert!(inst.query_twin(ms(5400), "gnb").unwrap().value.relationships.is_empty());
    assert_eq!(inst.delete_relationship(ms(5500), "gnb-ue"), Err(EngineError::UnknownRelationship("gnb-ue".into())));
    inst.delete_twin(ms(5600), "ue").unwrap();

    assert_eq!(
        e.create_relationship_between(ms(6000), "x", (a, "gnb"), (b, "ue"), "serves", &[]),
        Err(EngineError::CrossInstance)
    );
    let inst = e.instance_mut(b).unwrap();
    assert!(matches!(
        inst.create_relationship(ms(6000), "y", "gnb", "gnb", "serves", &[]),
        Err(EngineError::WrongTarget { .. })
    ));
    assert!(matches!(
        inst.create_relationship(ms(6000), "z", "gnb", "ue", "serves", &[("RNTI", Value::Int(1000))]),
        Err(EngineError::ValidationFailed(_))
    ));
}

#[test]
fn query_latency_follows_model_size() {
    let mut e = engine();
    for (n, want) in [(25usize, 60.0), (100, 60.0 + 0.4 * 75.0)] {
        let inst = bench_instance(&mut e, n, 1, 21);
        let xs: Vec<f64> = (0..10_000u64)
            .map(|k| millis(inst.query_twin(SimTime::from_secs_f64(10.0 + k as f64), "t0").unwrap().latency))
            .collect();
        let s = summary(&xs).unwrap();
        assert!((s.mean - want).abs() <= 2.0, "m={n}: {}", s.mean);
        assert!(s.min >= 60.0);
        assert_eq!(inst.meter().query_units, 10_000);
    }
}

#[test]
fn second_op_on_busy_twin_pays_exactly_the_lock_penalty() {
    let mut e = engine();
    let inst = bench_instance(&mut e, 25, 2, 31);
    for k in 0..200u64 {
        let t0 = SimTime::from_secs_f64(10.0 + k as f64);
        let t1 = t0 + Duration::from_millis(5);
        let first = inst.update_twin(t0, "t0", &full_patch(10, t0)).unwrap();
        let second = inst.update_twin(t1, "t0", &full_patch(10, t1)).unwrap();
        assert_eq!(first.lock_wait, Duration::ZERO);
        assert_eq!(second.lock_wait, Duration::from_millis(45));
        let other = inst.update_twin(t1, "t1", &full_patch(10, t1)).unwrap();
        assert_eq!(other.lock_wait, Duration::ZERO);
    }
}

#[test]
fn lag_does_not_depend_on_model_size() {
    let mut e = engine();
    let mut lags = Vec::new();
    for n in [50usize, 100] {
        let inst = bench_instance(&mut e, n, 1, 41 + n as u64);
        let xs: Vec<f64> = (0..10_000u64)
            .map(|k| {
                let at = SimTime::from_secs_f64(10.0 + k as f64);
                millis(inst.update_twin(at, "t0", &full_patch(25, at)).unwrap().lag)
            })
            .collect();
        lags.push(xs);
    }
    let r = ks_test(&lags[0], &lags[1], 0.05).unwrap();
    assert!(!r.reject, "{r:?}");
}

#[test]
fn clock_must_not_run_backwards() {
    let mut e = engine();
    let inst = bench_instance(&mut e, 1, 1, 1);
    inst.update_twin(ms(10_000), "t0", &full_patch(1, ms(10_000))).unwrap();
    assert!(matches!(inst.update_twin(ms(9_999), "t0", &full_patch(1, ms(9_999))), Err(EngineError::ClockRegression { .. })));
}

#[test]
fn same_seed_same_receipts() {
    let run = || {
        let mut e = engine();
        let inst = bench_instance(&mut e, 50, 3, 77);
        (0..300u64)
            .map(|k| {
                let at = SimTime::from_secs_f64(10.0 + k as f64 * 0.2);
                inst.update_twin(at, &format!("t{}", k % 3), &full_patch(20, at)).unwrap()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[derive(Debug, Clone)]
enum Op {
    Update { twin: usize, entries: Vec<(usize, i64)> },
    Remove { twin: usize, slot: usize },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..3usize, prop::collection::vec((0..10usize, -50i64..1200), 1..6))
            .prop_map(|(twin, entries)| Op::Update { twin, entries }),
        1 => (0..3usize, 0..10usize).prop_map(|(twin, slot)| Op::Remove { twin, slot }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// No call sequence produces a twin that violates its model, and exactly
    /// one property event is emitted per patched property of accepted updates.
    #[test]
    fn validation_gate_and_event_completeness(ops in prop::collection::vec(op(), 1..60)) {
        let mut e = engine();
        let h = e.create_instance("p", ClockMode::Simulated, 3).unwrap();
        let inst = e.instance_mut(h).unwrap();
        inst.upload_models(SimTime::ZERO, &BuiltinModels::cell_documents()).unwrap();
        for t in 0..3 {
            inst.create_twin(SimTime::ZERO, &format!("ue{t}"), CELL_UE_MODEL, &[]).unwrap();
        }
        let model = builtin_models().cell_ue;
        let int_slots: Vec<&str> = ["RNTI", "RSRP", "Buffer", "UL CQI", "DL CQI", "UL MCS", "DL MCS", "UL BLER", "DL BLER", "Location"].to_vec();
        let mut patched = 0u64;
        let mut drained = 0u64;
        for (k, op) in ops.iter().enumerate() {
            let at = SimTime::from_secs_f64(10.0 + k as f64 * 0.3);
            let (twin, patch) = match op {
                Op::Update { twin, entries } => (*twin, entries.iter().map(|&(s, v)| PatchEntry::set(int_slots[s], v, at)).collect::<Vec<_>>()),
                Op::Remove { twin, slot } => (*twin, vec![PatchEntry::remove(int_slots[*slot], at)]),
            };
            if inst.update_twin(at, &format!("ue{twin}"), &patch).is_ok() {
                patched += patch.len() as u64;
            }
            drained += inst.drain_events().iter().filter(|ev| ev.is_property()).count() as u64;
            for t in 0..3 {
                let st = inst.twin_state(&format!("ue{t}")).unwrap();
                let verdict = twinran::model::validate_patch(&model, st.properties.iter().map(|(p, v)| (p.as_str(), Some(&v.value))));
                prop_assert!(verdict.is_accept(), "{verdict:?}");
            }
        }
        prop_assert_eq!(patched, drained);
        prop_assert_eq!(inst.stats().property_events, patched);
    }
}

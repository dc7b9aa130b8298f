use anyhow::Result;
use serde::Serialize;
use twinran::scenario::{run_scenario, KpiReport, Profile, RunConfig};

use crate::report::{Checks, Out};

#[derive(Serialize)]
struct Row<'a> {
    kpi: &'a str,
    value: f64,
    unit: &'a str,
}

fn rows(r: &KpiReport) -> Vec<Row<'static>> {
    let mut v = vec![
        Row { kpi: "data_volume", value: r.data_volume_mb_per_h, unit: "MB/h" },
        Row { kpi: "messages", value: r.hourly.messages, unit: "1/h" },
        Row { kpi: "operations", value: r.hourly.operations, unit: "1/h" },
        Row { kpi: "event_hub_messages", value: r.hourly.event_hub_messages, unit: "1/h" },
        Row { kpi: "events_per_s", value: r.events_per_s, unit: "1/s" },
        Row { kpi: "cost_messages", value: r.cost.messages, unit: "USD/h" },
        Row { kpi: "cost_operations", value: r.cost.operations, unit: "USD/h" },
        Row { kpi: "cost_event_hub", value: r.cost.event_hub, unit: "USD/h" },
        Row { kpi: "cost_data_explorer", value: r.cost.data_explorer, unit: "USD/h" },
        Row { kpi: "cost_query_units", value: r.cost.query_units, unit: "USD/h" },
        Row { kpi: "cost_function_executions", value: r.cost.function_executions, unit: "USD/h" },
        Row { kpi: "cost_base", value: r.base_cost, unit: "USD/h" },
        Row { kpi: "cost_total", value: r.cost.total, unit: "USD/h" },
        Row { kpi: "base_per_user", value: r.base_per_user, unit: "USD/h" },
        Row { kpi: "total_per_user", value: r.total_per_user, unit: "USD/h" },
        Row { kpi: "handovers", value: r.handovers as f64, unit: "" },
    ];
    if let Some(l) = &r.twin_lag {
        v.push(Row { kpi: "twin_lag_mean", value: l.mean_ms, unit: "ms" });
        v.push(Row { kpi: "twin_lag_max", value: l.max_ms, unit: "ms" });
        v.push(Row { kpi: "twin_lag_events", value: l.events as f64, unit: "" });
    }
    if let Some(s) = &r.spawn {
        v.push(Row { kpi: "spawn_mean", value: s.mean_s, unit: "s" });
        v.push(Row { kpi: "spawn_max", value: s.max_s, unit: "s" });
        v.push(Row { kpi: "spawn_function_executions", value: s.function_executions as f64, unit: "" });
    }
    if let Some(q) = r.snapshot_query_units {
        v.push(Row { kpi: "snapshot_query_units", value: q as f64, unit: "" });
    }
    v
}

/// Stored volume, twin-to-twin lag, spawn and snapshot figures.
pub fn kpi_checks(r: &KpiReport) -> Checks {
    let mut c = Checks::default();
    c.near("stored data volume", r.data_volume_mb_per_h, 48.0, 4.8, "MB/h");
    match &r.twin_lag {
        Some(l) => {
            c.near("twin-to-twin lag mean", l.mean_ms, 140.0, 15.0, "ms");
            c.at_most("twin-to-twin lag max", l.max_ms, 600.0, "ms");
            c.add("twin-to-twin events", l.events >= 10_000, format!("{} (want ≥ 10000)", l.events));
        }
        None => c.add("twin-to-twin lag", false, "no location feed"),
    }
    match &r.spawn {
        Some(s) => {
            c.near(&format!("spawn-{} mean over {} trials", s.copies, s.trials), s.mean_s, 22.0, 3.0, "s");
            c.at_most(&format!("spawn-{} max", s.copies), s.max_s, 34.0, "s");
            c.equal("spawn failures", s.failures, 0);
            c.equal("spawn function executions", s.function_executions, 107);
        }
        None => c.add("spawn", false, "not run"),
    }
    c.equal("snapshot query units", r.snapshot_query_units, Some(800));
    c
}

/// Hourly meters and prices.
pub fn cost_checks(r: &KpiReport) -> Checks {
    let mut c = Checks::default();
    c.near("messages per hour", r.hourly.messages / 1e6, 30.0, 1.5, "M");
    c.near("operations per hour", r.hourly.operations / 1e6, 4.0, 0.2, "M");
    c.near("base cost", r.base_cost, 40.0, 2.0, "$/h");
    c.near("total cost", r.cost.total, 48.5, 48.5 * 0.05, "$/h");
    c.near("event hub", r.cost.event_hub, 7.0, 0.7, "$/h");
    c.near("data explorer", r.cost.data_explorer, 1.5, 1e-9, "$/h");
    c.add("per-user cost reported", r.base_per_user > 0.0, format!("{:.4} base, {:.4} total $/user/h", r.base_per_user, r.total_per_user));
    c
}

pub fn checks(r: &KpiReport) -> Checks {
    let mut c = Checks::default();
    c.add("run completed", r.aborted.is_none(), r.aborted.clone().unwrap_or_default());
    match r.profile {
        Profile::BillingCalibrated => {
            c.extend(kpi_checks(r));
            c.extend(cost_checks(r));
        }
        Profile::MaxRate => {
            c.near("events per second", r.events_per_s, 64_000.0, 6_400.0, "1/s");
            c.near("messages per hour", r.hourly.messages / 1e6, 30.0, 1.5, "M");
        }
    }
    c
}

pub fn run(config: &RunConfig, out: &Out) -> Result<(KpiReport, Checks)> {
    let report = run_scenario(config)?;
    println!("{report}");
    let checks = checks(&report);
    out.json("report.json", &report)?;
    out.text("report.txt", &format!("{report}\n"))?;
    out.csv("kpi.csv", rows(&report))?;
    out.json("checks.json", &checks)?;
    Ok((report, checks))
}

mod acceptance;
mod latency;
mod report;
mod scenario;
mod spawn;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use twinran::bench::BenchConfig;
use twinran::scenario::{Profile, RunConfig};

use report::{load_json, Checks, Out};

#[derive(Parser)]
#[command(name = "bench", version, about = "Latency, scenario, spawn and KS runs against the twin engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: bench-out/<command>]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Latency campaign over the model and update sizes, plus lock and limit probes.
    Latency {
        #[command(flatten)]
        common: Common,
    },
    /// One emulated deployment with billing.
    Scenario {
        #[command(flatten)]
        common: Common,
        /// Ignored when --config is given.
        #[arg(long, default_value = "billing-calibrated")]
        profile: Profile,
        /// Simulated seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        spawn_trials: Option<usize>,
    },
    /// Snapshot a live deployment and time repeated spawns.
    Spawn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        copies: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Two-sample KS test, of two CSV files or of the lag distribution.
    Kstest {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "b")]
        a: Option<PathBuf>,
        #[arg(long, requires = "a")]
        b: Option<PathBuf>,
        /// Column name in both files [default: the first column]
        #[arg(long)]
        column: Option<String>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Run the acceptance criteria, all or those given with --criterion.
    Acceptance {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=10))]
        criterion: Vec<u8>,
        /// Simulated length of the billing scenario.
        #[arg(long, default_value_t = 3600.0)]
        scenario_s: f64,
        #[arg(long, default_value_t = 100)]
        spawn_trials: usize,
    },
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => load_json(p),
        None => Ok(T::default()),
    }
}

/// Overlays a partial config on the settings of the profile it names.
fn profile_config(path: &Path) -> Result<RunConfig> {
    let file: serde_json::Value = load_json(path)?;
    let profile = match file.get("profile") {
        Some(p) => serde_json::from_value(p.clone())?,
        None => Profile::BillingCalibrated,
    };
    let mut merged = serde_json::to_value(RunConfig::profile(profile))?;
    overlay(&mut merged, file);
    Ok(serde_json::from_value(merged)?)
}

fn overlay(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn out_dir(common: &Common, name: &str) -> Result<Out> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("bench-out").join(name));
    Out::create(&dir)
}

fn finish(checks: &Checks, out: &Out) -> Result<bool> {
    checks.print();
    out.json("checks.json", checks)?;
    Ok(checks.all_pass())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Latency { common } => {
            let mut cfg: BenchConfig = config_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let out = out_dir(&common, "latency")?;
            let checks = latency::run(&cfg, &out)?.all();
            finish(&checks, &out)
        }
        Command::Scenario { common, profile, duration, spawn_trials } => {
            let mut cfg = match &common.config {
                Some(p) => profile_config(p)?,
                None => RunConfig::profile(profile),
            };
            if let Some(s) = common.seed {
                cfg = cfg.with_seed(s);
            }
            if let Some(d) = duration {
                cfg.duration_s = d;
            }
            if let Some(t) = spawn_trials {
                cfg.spawn_trials = t;
            }
            cfg.validate()?;
            let out = out_dir(&common, "scenario")?;
            let (_, checks) = scenario::run(&cfg, &out)?;
            checks.print();
            Ok(checks.all_pass())
        }
        Command::Spawn { common, copies, trials } => {
            let mut cfg: spawn::SpawnRun = config_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.scenario.seed = s;
                cfg.spawn.seed = s;
            }
            if let Some(c) = copies {
                cfg.copies = c;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let out = out_dir(&common, "spawn")?;
            let checks = spawn::run(&cfg, &out)?;
            finish(&checks, &out)
        }
        Command::Kstest { common, a, b, column, alpha } => {
            if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
                bail!("alpha must be in (0, 1)");
            }
            let mut cfg: BenchConfig = config_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let files = match (a, b) {
                (Some(a), Some(b)) => Some((latency::read_column(&a, column.as_deref())?, latency::read_column(&b, column.as_deref())?)),
                _ => None,
            };
            let out = out_dir(&common, "kstest")?;
            let checks = latency::kstest(&cfg, files, alpha, &out)?;
            finish(&checks, &out)
        }
        Command::Acceptance { common, criterion, scenario_s, spawn_trials } => {
            if common.config.is_some() {
                bail!("acceptance runs fixed configurations; --config is not accepted");
            }
            let opts = acceptance::Options { seed: common.seed.unwrap_or(1), scenario_s, spawn_trials };
            let which: Vec<usize> = criterion.into_iter().map(usize::from).collect();
            let out = out_dir(&common, "acceptance")?;
            let outcomes = acceptance::run(&which, &opts, &out)?;
            for o in &outcomes {
                println!("criterion {:>2} {}: {}", o.criterion, o.title, if o.pass { "PASS" } else { "FAIL" });
                for c in o.checks.0.iter().filter(|c| !c.pass) {
                    println!("    FAIL {} {}", c.name, c.detail);
                }
            }
            out.json("acceptance.json", &outcomes)?;
            Ok(outcomes.iter().all(|o| o.pass))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

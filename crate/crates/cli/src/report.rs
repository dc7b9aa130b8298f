//! In-run assertions and output files.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Default, Serialize)]
pub struct Checks(pub Vec<Check>);

impl Checks {
    pub fn add(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.0.push(Check { name: name.into(), pass, detail: detail.into() });
    }

    /// `value` within `tol` of `target`.
    pub fn near(&mut self, name: &str, value: f64, target: f64, tol: f64, unit: &str) {
        let pass = (value - target).abs() <= tol;
        let tol = (tol * 1e6).round() / 1e6;
        self.add(name, pass, format!("{value:.3} {unit} (want {target} ± {tol})"));
    }

    pub fn within(&mut self, name: &str, value: f64, lo: f64, hi: f64, unit: &str) {
        let pass = (lo..=hi).contains(&value);
        self.add(name, pass, format!("{value:.3} {unit} (want {lo}..={hi})"));
    }

    pub fn at_most(&mut self, name: &str, value: f64, max: f64, unit: &str) {
        self.add(name, value <= max, format!("{value:.3} {unit} (want ≤ {max})"));
    }

    pub fn equal<T: PartialEq + std::fmt::Debug>(&mut self, name: &str, got: T, want: T) {
        let pass = got == want;
        self.add(name, pass, format!("{got:?} (want {want:?})"));
    }

    pub fn all_pass(&self) -> bool {
        self.0.iter().all(|c| c.pass)
    }

    pub fn extend(&mut self, other: Checks) {
        self.0.extend(other.0);
    }

    pub fn print(&self) {
        for c in &self.0 {
            println!("{} {:<40} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
}

/// Output directory of one invocation.
pub struct Out {
    dir: PathBuf,
}

impl Out {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Out { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.text(name, &text)
    }

    pub fn text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        File::create(&p).and_then(|mut f| f.write_all(text.as_bytes())).with_context(|| format!("writing {}", p.display()))
    }

    pub fn csv<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

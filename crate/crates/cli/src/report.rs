//! Run reports, on-disk artifacts and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Kind};

/// One pass/fail decision with its numeric margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: String,
    /// Acceptance criterion this check belongs to, if any.
    pub criterion: Option<u8>,
    pub value: f64,
    pub threshold: f64,
    /// `<=` or `>=`: how `value` is compared with `threshold`.
    pub relation: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn at_most(id: &str, criterion: Option<u8>, value: f64, threshold: f64) -> Self {
        Self {
            id: id.into(),
            criterion,
            value,
            threshold,
            relation: "<=".into(),
            pass: value <= threshold,
            detail: String::new(),
        }
    }

    pub fn at_least(id: &str, criterion: Option<u8>, value: f64, threshold: f64) -> Self {
        Self {
            id: id.into(),
            criterion,
            value,
            threshold,
            relation: ">=".into(),
            pass: value >= threshold,
            detail: String::new(),
        }
    }

    /// A boolean property; value 1 if it holds.
    pub fn holds(id: &str, criterion: Option<u8>, ok: bool) -> Self {
        Self::at_least(id, criterion, if ok { 1.0 } else { 0.0 }, 1.0)
    }

    pub fn with_detail(mut self, d: impl Into<String>) -> Self {
        self.detail = d.into();
        self
    }

    /// `threshold - value` for `<=`, `value - threshold` for `>=`.
    pub fn margin(&self) -> f64 {
        if self.relation == "<=" {
            self.threshold - self.value
        } else {
            self.value - self.threshold
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricClass {
    /// A Monte Carlo estimate carrying a standard error.
    Statistical,
    /// A discretization residual: smaller is better, improves with the grid.
    Residual,
    /// A deterministic value.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub se: Option<f64>,
    pub class: MetricClass,
}

impl Metric {
    pub fn stat(value: f64, se: f64) -> Self {
        Self { value, se: Some(se), class: MetricClass::Statistical }
    }

    pub fn residual(value: f64) -> Self {
        Self { value, se: None, class: MetricClass::Residual }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, se: None, class: MetricClass::Exact }
    }
}

/// A plot-ready numeric table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Everything an experiment produces, before it is written out.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
    pub metrics: BTreeMap<String, Metric>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    pub fn metric(&mut self, name: impl Into<String>, m: Metric) {
        self.metrics.insert(name.into(), m);
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Checks of one acceptance criterion.
    pub fn criterion(&self, k: u8) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(move |c| c.criterion == Some(k))
    }

    pub fn extend(&mut self, other: Report) {
        self.checks.extend(other.checks);
        self.metrics.extend(other.metrics);
        self.tables.extend(other.tables);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: Kind,
    pub seed: u64,
    pub config_sha256: String,
    pub code_version: String,
    pub threads: usize,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub grid_n: usize,
    pub all_pass: bool,
    pub checks: Vec<Check>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Every regular file under `dir`, relative and sorted.
fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir)?.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(contents)?;
    Ok(())
}

/// Writes `config.json`, `metrics.json`, the CSV tables and `manifest.json`
/// into `out` (the experiment may already have written `fields/`).
pub fn write_outputs(
    out: &Path,
    cfg: &ExperimentConfig,
    report: &Report,
    threads: usize,
    started: f64,
) -> Result<RunManifest> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let canon = cfg.canonical_json();
    write_file(&out.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    write_file(&out.join("metrics.json"), serde_json::to_string_pretty(&report.metrics)?.as_bytes())?;
    write_file(&out.join("checks.csv"), checks_csv(&report.checks).as_bytes())?;
    for t in &report.tables {
        write_file(&out.join(format!("{}.csv", t.name)), t.to_csv().as_bytes())?;
    }
    let mut files = Vec::new();
    for rel in list_files(out)? {
        if rel == Path::new("manifest.json") {
            continue;
        }
        let bytes = fs::read(out.join(&rel))?;
        files.push(FileEntry { path: rel.to_string_lossy().replace('\\', "/"), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
    }
    let manifest = RunManifest {
        kind: cfg.kind,
        seed: cfg.seed,
        config_sha256: sha256_hex(canon.as_bytes()),
        code_version: env!("CARGO_PKG_VERSION").into(),
        threads,
        started_unix: started,
        finished_unix: unix_now(),
        grid_n: cfg.grid.n,
        all_pass: report.all_pass(),
        checks: report.checks.clone(),
        files,
    };
    write_file(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn checks_csv(checks: &[Check]) -> String {
    let mut s = String::from("id,criterion,value,threshold,relation,pass\n");
    for c in checks {
        let crit = c.criterion.map(|k| k.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{crit},{:e},{:e},{},{}\n", c.id, c.value, c.threshold, c.relation, c.pass));
    }
    s
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

pub fn read_metrics(dir: &Path) -> Result<BTreeMap<String, Metric>> {
    let p = dir.join("metrics.json");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

/// Re-hashes every listed file; returns the paths whose checksum changed.
pub fn verify_manifest(dir: &Path, m: &RunManifest) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for f in &m.files {
        let bytes = fs::read(dir.join(&f.path)).with_context(|| format!("reading {}", f.path))?;
        if sha256_hex(&bytes) != f.sha256 {
            bad.push(f.path.clone());
        }
    }
    Ok(bad)
}

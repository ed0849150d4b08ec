//! Side-by-side comparison of two run directories.

use std::path::Path;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use crate::report::{read_manifest, read_metrics, MetricClass, Table};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDiff {
    pub name: String,
    pub class: MetricClass,
    pub a: f64,
    pub b: f64,
    pub diff: f64,
    /// Combined standard error for statistical metrics.
    pub se: Option<f64>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub kind: String,
    pub diffs: Vec<MetricDiff>,
    /// Metrics present in only one of the runs.
    pub unmatched: Vec<String>,
    /// Whether the two runs used different grid resolutions.
    pub refinement: bool,
    /// On a refinement pair: every residual metric is no larger on the finer grid.
    pub residuals_monotone: Option<bool>,
    pub flagged: usize,
}

impl CompareReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new("compare", &["a", "b", "diff", "se", "flagged"]);
        for d in &self.diffs {
            t.push(vec![d.a, d.b, d.diff, d.se.unwrap_or(f64::NAN), if d.flagged { 1.0 } else { 0.0 }]);
        }
        t
    }

    /// Plain-text listing, one metric per line.
    pub fn render(&self) -> String {
        let mut s = format!("kind {}: {} metrics, {} flagged\n", self.kind, self.diffs.len(), self.flagged);
        for d in &self.diffs {
            let se = d.se.map(|x| format!(" (se {x:.3e})")).unwrap_or_default();
            let flag = if d.flagged { "  <-- flagged" } else { "" };
            s.push_str(&format!("{:<48} {:>13.6e} {:>13.6e} {:>+13.6e}{se}{flag}\n", d.name, d.a, d.b, d.diff));
        }
        if let Some(m) = self.residuals_monotone {
            s.push_str(&format!("residuals improve with the finer grid: {m}\n"));
        }
        for u in &self.unmatched {
            s.push_str(&format!("only in one run: {u}\n"));
        }
        s
    }
}

/// Tabulates metric differences between runs `a` and `b` of the same kind.
///
/// Statistical metrics are flagged beyond 3 combined standard errors, exact
/// metrics on any relative change above 1e-9. Residual metrics are flagged
/// when they grow on the finer of two grids, or change at equal grids.
pub fn compare(a: &Path, b: &Path) -> Result<CompareReport> {
    let (ma, mb) = (read_manifest(a)?, read_manifest(b)?);
    if ma.kind != mb.kind {
        bail!("incompatible runs: {} is {} but {} is {}", a.display(), ma.kind, b.display(), mb.kind);
    }
    let (xa, xb) = (read_metrics(a)?, read_metrics(b)?);
    let refinement = ma.grid_n != mb.grid_n;
    let b_finer = mb.grid_n > ma.grid_n;
    let mut diffs = Vec::new();
    let mut unmatched = Vec::new();
    let mut monotone = true;
    let mut any_residual = false;
    for (name, va) in &xa {
        let Some(vb) = xb.get(name) else {
            unmatched.push(name.clone());
            continue;
        };
        let diff = vb.value - va.value;
        let (se, flagged) = match va.class {
            MetricClass::Statistical => {
                let se = va.se.unwrap_or(0.0).hypot(vb.se.unwrap_or(0.0));
                (Some(se), diff.abs() > 3.0 * se)
            }
            MetricClass::Exact => (None, diff.abs() > 1e-9 * va.value.abs().max(vb.value.abs()).max(1e-300)),
            MetricClass::Residual => {
                any_residual = true;
                let (coarse, fine) = if b_finer { (va.value, vb.value) } else { (vb.value, va.value) };
                let bad = if refinement { fine > coarse } else { diff != 0.0 };
                if refinement && fine > coarse {
                    monotone = false;
                }
                (None, bad)
            }
        };
        diffs.push(MetricDiff { name: name.clone(), class: va.class, a: va.value, b: vb.value, diff, se, flagged });
    }
    unmatched.extend(xb.keys().filter(|k| !xa.contains_key(*k)).cloned());
    let flagged = diffs.iter().filter(|d| d.flagged).count();
    Ok(CompareReport {
        kind: ma.kind.to_string(),
        diffs,
        unmatched,
        refinement,
        residuals_monotone: (refinement && any_residual).then_some(monotone),
        flagged,
    })
}

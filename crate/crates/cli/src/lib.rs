//! Config-driven experiment runner: reads a JSON experiment description,
//! runs it against `coulomb-core` and writes CSV/JSON artifacts with a
//! checksummed manifest.

pub mod compare;
pub mod config;
pub mod experiments;
pub mod report;

use std::path::Path;

use anyhow::Result;

pub use config::{ExperimentConfig, Kind};
pub use report::{Report, RunManifest};

/// Runs `cfg`, writing every artifact under `out`.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<(Report, RunManifest)> {
    let started = report::unix_now();
    std::fs::create_dir_all(out)?;
    let report = experiments::run(cfg, Some(&out.join("fields")))?;
    let manifest = report::write_outputs(out, cfg, &report, threads, started)?;
    Ok((report, manifest))
}

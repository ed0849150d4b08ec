use std::path::{Path, PathBuf};
use std::process::Command;

use coulomb_cli::compare::compare;
use coulomb_cli::config::{ExperimentConfig, Kind, Source};
use coulomb_cli::report::{read_manifest, verify_manifest, RunManifest};
use coulomb_cli::run_to_dir;

fn tmp(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&d);
    d
}

/// A small Ginibre CLT run: seconds, not minutes.
fn small_clt(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(Kind::CltVerify, seed);
    c.grid.n = 128;
    c.sampler.n = 16;
    c.sampler.samples = 400;
    c.clt.variance_tol = None;
    c
}

fn small_identity(grid_n: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(Kind::IdentitySuite, 3);
    c.grid.half_width = 1.5;
    c.grid.n = grid_n;
    c.identity.n = 8;
    c.identity.refine = vec![64, 128];
    c.identity.sandwich_configs = 1;
    c
}

fn without_times(mut m: RunManifest) -> RunManifest {
    m.started_unix = 0.0;
    m.finished_unix = 0.0;
    m
}

#[test]
fn negative_beta_names_the_field_and_line() {
    let text = "{\n  \"kind\": \"clt-verify\",\n  \"seed\": 1,\n  \"sampler\": {\n    \"source\": \"mcmc\",\n    \"beta\": -2.0\n  }\n}";
    let e = ExperimentConfig::parse(text).unwrap_err();
    assert_eq!(e.field, "sampler.beta");
    assert_eq!(e.line, Some(6));
    assert!(e.to_string().contains("sampler.beta"), "{e}");
}

#[test]
fn config_errors() {
    let e = ExperimentConfig::parse(r#"{ "kind": "minimize" }"#).unwrap_err();
    assert_eq!(e.field, "seed");
    let e = ExperimentConfig::parse(r#"{ "kind": "minimize", "seed": 1, "test_functions": [{ "name": "nope" }] }"#).unwrap_err();
    assert_eq!(e.field, "test_functions[0].name");
    let e = ExperimentConfig::parse(r#"{ "kind": "minimize", "seed": 1, "colour": 3 }"#).unwrap_err();
    assert_eq!(e.field, "colour");
    let e = ExperimentConfig::parse(r#"{ "kind": "clt-verify", "seed": 1, "sampler": { "beta": 1.0 } }"#).unwrap_err();
    assert_eq!(e.field, "sampler.source");
    let e = ExperimentConfig::parse(r#"{ "kind": "moddev", "seed": 1, "moddev": { "taus": [0.0, 1.0] } }"#).unwrap_err();
    assert_eq!(e.field, "moddev.taus");
    let e = ExperimentConfig::parse(r#"{ "kind": "minimize", "seed": 1, "potential": { "kind": "quadratic", "a": -1 } }"#)
        .unwrap_err();
    assert_eq!(e.field, "potential");
    let e = ExperimentConfig::parse(r#"{ "kind": "warp", "seed": 1 }"#).unwrap_err();
    assert_eq!(e.line, Some(1));
    // every shipped config is valid
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{e:#}"));
    }
}

#[test]
fn defaults_roundtrip() {
    let c = ExperimentConfig::new(Kind::TransportCheck, 9);
    let back = ExperimentConfig::parse(&c.canonical_json()).unwrap();
    assert_eq!(back, c);
    assert_eq!(c.sampler.source, Source::Ginibre);
}

#[test]
fn binary_rejects_bad_configs() {
    let dir = tmp("bad-config");
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join("bad.json");
    std::fs::write(&p, r#"{ "kind": "clt-verify", "seed": 1, "sampler": { "source": "mcmc", "beta": -1 } }"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_coulomb"))
        .args(["clt-verify", "--config", p.to_str().unwrap(), "--out", dir.join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sampler.beta"));
    // no seed anywhere
    let out = Command::new(env!("CARGO_BIN_EXE_coulomb")).args(["moddev"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn binary_runs_and_lists_checksummed_outputs() {
    let dir = tmp("bin-run");
    let cfg = dir.join("c.json");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(&cfg, small_clt(5).canonical_json()).unwrap();
    let out = dir.join("out");
    let st = Command::new(env!("CARGO_BIN_EXE_coulomb"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"])
        .output()
        .unwrap();
    let m = read_manifest(&out).unwrap();
    assert_eq!(st.status.success(), m.all_pass, "{}", String::from_utf8_lossy(&st.stdout));
    assert!(m.checks.iter().any(|c| c.id.ends_with(".ks")));
    let names: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    for want in ["config.json", "metrics.json", "checks.csv", "fields/equilibrium/equilibrium.json"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert!(verify_manifest(&out, &m).unwrap().is_empty());
}

#[test]
fn identical_configs_give_identical_manifests() {
    let mut c = small_clt(11);
    c.sampler.source = Source::Both;
    c.sampler.samples = 240;
    c.sampler.burn_in = 100;
    let (a, b) = (tmp("repro-a"), tmp("repro-b"));
    let (_, ma) = run_to_dir(&c, &a, 1).unwrap();
    let (_, mb) = run_to_dir(&c, &b, 1).unwrap();
    assert_eq!(without_times(ma), without_times(mb));
    let r = compare(&a, &b).unwrap();
    assert!(r.diffs.iter().all(|d| d.diff == 0.0));
    assert_eq!(r.flagged, 0);
}

#[test]
fn different_seeds_agree_within_standard_errors() {
    let (a, b) = (tmp("seed-a"), tmp("seed-b"));
    run_to_dir(&small_clt(21), &a, 1).unwrap();
    run_to_dir(&small_clt(22), &b, 1).unwrap();
    let r = compare(&a, &b).unwrap();
    let stat: Vec<_> = r.diffs.iter().filter(|d| d.se.is_some()).collect();
    assert!(!stat.is_empty());
    assert!(stat.iter().all(|d| d.diff != 0.0 && !d.flagged), "{}", r.render());
}

#[test]
fn refinement_improves_residuals() {
    let (a, b) = (tmp("refine-a"), tmp("refine-b"));
    run_to_dir(&small_identity(64), &a, 1).unwrap();
    run_to_dir(&small_identity(128), &b, 1).unwrap();
    let r = compare(&a, &b).unwrap();
    assert!(r.refinement);
    assert_eq!(r.residuals_monotone, Some(true), "{}", r.render());
}

#[test]
fn incompatible_kinds_are_refused() {
    let (a, b) = (tmp("kind-a"), tmp("kind-b"));
    run_to_dir(&small_clt(1), &a, 1).unwrap();
    let mut m = ExperimentConfig::new(Kind::Minimize, 1);
    m.grid.half_width = 1.5;
    m.grid.n = 64;
    m.minimize.n = 12;
    m.minimize.restarts = 2;
    m.test_functions = vec![coulomb_cli::config::TestFunctionSpec::named("bump-center")];
    run_to_dir(&m, &b, 1).unwrap();
    let e = compare(&a, &b).unwrap_err();
    assert!(e.to_string().contains("incompatible"), "{e}");
    assert!(compare(&a, Path::new("/nonexistent")).is_err());
}

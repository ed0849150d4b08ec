//! Experiment configuration: JSON with defaults, validated before any work.

use std::fmt;
use std::path::{Path, PathBuf};

use coulomb_core::potential::PotentialSpec;
use coulomb_core::test_function::{by_name, TestFunction};
use coulomb_core::Point;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    IdentitySuite,
    CltVerify,
    MesoVerify,
    Minimize,
    TransportCheck,
    Moddev,
}

impl Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::IdentitySuite => "identity-suite",
            Kind::CltVerify => "clt-verify",
            Kind::MesoVerify => "meso-verify",
            Kind::Minimize => "minimize",
            Kind::TransportCheck => "transport-check",
            Kind::Moddev => "moddev",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Ginibre,
    Mcmc,
    Both,
}

/// A library test function, optionally moved and rescaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionSpec {
    pub name: String,
    #[serde(default)]
    pub center: Option<Point>,
    #[serde(default)]
    pub scale: Option<f64>,
}

impl TestFunctionSpec {
    pub fn named(name: &str) -> Self {
        Self { name: name.into(), center: None, scale: None }
    }

    pub fn build(&self) -> coulomb_core::Result<TestFunction> {
        let mut t = by_name(&self.name)?;
        if let Some(c) = self.center {
            t.center = c;
        }
        if let Some(s) = self.scale {
            t = t.with_scale(s);
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default = "d_source")]
    pub source: Source,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_beta")]
    pub beta: f64,
    /// Extra inverse temperatures for a sweep; empty means `[beta]`.
    #[serde(default)]
    pub betas: Vec<f64>,
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_chains")]
    pub chains: usize,
    #[serde(default = "d_burn_in")]
    pub burn_in: usize,
    #[serde(default = "d_thinning")]
    pub thinning: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            source: d_source(),
            n: d_n(),
            beta: d_beta(),
            betas: Vec::new(),
            samples: d_samples(),
            chains: d_chains(),
            burn_in: d_burn_in(),
            thinning: d_thinning(),
        }
    }
}

impl SamplerSection {
    pub fn beta_list(&self) -> Vec<f64> {
        if self.betas.is_empty() {
            vec![self.beta]
        } else {
            self.betas.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "d_half_width")]
    pub half_width: f64,
    #[serde(default = "d_grid_n")]
    pub n: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { half_width: d_half_width(), n: d_grid_n() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySection {
    /// Points per configuration in the splitting and truncation checks.
    #[serde(default = "d_identity_n")]
    pub n: usize,
    /// Coarse and fine grid sizes for the refinement checks.
    #[serde(default = "d_refine")]
    pub refine: Vec<usize>,
    #[serde(default = "d_sandwich")]
    pub sandwich_configs: usize,
    /// Half-width of the box for the splitting check.
    #[serde(default = "d_identity_half")]
    pub half_width: f64,
}

impl Default for IdentitySection {
    fn default() -> Self {
        Self { n: d_identity_n(), refine: d_refine(), sandwich_configs: d_sandwich(), half_width: d_identity_half() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltSection {
    /// Relative tolerance of the empirical variance against the prediction;
    /// `null` disables the check.
    #[serde(default = "d_var_tol")]
    pub variance_tol: Option<f64>,
    /// Minimum KS p-value; `null` disables the test.
    #[serde(default = "d_ks")]
    pub ks_alpha: Option<f64>,
    /// Pairwise tolerance of `beta Var` across a beta sweep.
    #[serde(default = "d_ratio_tol")]
    pub ratio_tol: f64,
    /// Betas at which the mean is compared with the prediction; empty means all.
    #[serde(default)]
    pub mean_betas: Vec<f64>,
}

impl Default for CltSection {
    fn default() -> Self {
        Self { variance_tol: d_var_tol(), ks_alpha: d_ks(), ratio_tol: d_ratio_tol(), mean_betas: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MesoSection {
    #[serde(default = "d_meso_ns")]
    pub ns: Vec<usize>,
    /// `l_N = N^(-exponent)`.
    #[serde(default = "d_meso_exp")]
    pub exponent: f64,
    #[serde(default = "d_meso_tol")]
    pub variance_tol: f64,
}

impl Default for MesoSection {
    fn default() -> Self {
        Self { ns: d_meso_ns(), exponent: d_meso_exp(), variance_tol: d_meso_tol() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimizeSection {
    #[serde(default = "d_min_n")]
    pub n: usize,
    #[serde(default = "d_restarts")]
    pub restarts: usize,
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default = "d_grad_tol")]
    pub grad_tol: f64,
    /// `|Fluct| <= tol * ||xi||_inf`.
    #[serde(default = "d_min_tol")]
    pub fluct_tol: f64,
}

impl Default for MinimizeSection {
    fn default() -> Self {
        Self { n: d_min_n(), restarts: d_restarts(), max_iters: d_max_iters(), grad_tol: d_grad_tol(), fluct_tol: d_min_tol() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    #[serde(default = "d_tr_n")]
    pub n: usize,
    #[serde(default = "d_tr_ts")]
    pub ts: Vec<f64>,
    #[serde(default = "d_tr_s")]
    pub s: f64,
    #[serde(default = "d_tr_sweep")]
    pub sweep: Vec<f64>,
    /// Times for the push-forward order study.
    #[serde(default = "d_tr_push_ts")]
    pub pushforward_ts: Vec<f64>,
    /// Resolution of the divergence check grid (on `[-1, 1]^2`).
    #[serde(default = "d_tr_div")]
    pub divergence_grid: usize,
}

impl Default for TransportSection {
    fn default() -> Self {
        Self {
            n: d_tr_n(),
            ts: d_tr_ts(),
            s: d_tr_s(),
            sweep: d_tr_sweep(),
            pushforward_ts: d_tr_push_ts(),
            divergence_grid: d_tr_div(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModdevSection {
    #[serde(default = "d_taus")]
    pub taus: Vec<f64>,
}

impl Default for ModdevSection {
    fn default() -> Self {
        Self { taus: d_taus() }
    }
}

/// One experiment, fully specified. `seed` has no default: every run names
/// its randomness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub seed: u64,
    #[serde(default = "d_potential")]
    pub potential: PotentialSpec,
    #[serde(default = "d_functions")]
    pub test_functions: Vec<TestFunctionSpec>,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub identity: IdentitySection,
    #[serde(default)]
    pub clt: CltSection,
    #[serde(default)]
    pub meso: MesoSection,
    #[serde(default)]
    pub minimize: MinimizeSection,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub moddev: ModdevSection,
}

/// A config error naming the offending field and, when known, its line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config field `{}` (line {l}): {}", self.field, self.message),
            None => write!(f, "config field `{}`: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Line of the first occurrence of `"key"` in the source text.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    let pat = format!("\"{leaf}\"");
    text.lines().position(|l| l.contains(&pat)).map(|i| i + 1)
}

/// Field named in a serde message: the first backquoted word.
fn serde_field(msg: &str) -> Option<String> {
    let a = msg.find('`')?;
    let b = msg[a + 1..].find('`')?;
    Some(msg[a + 1..a + 1 + b].to_string())
}

impl ExperimentConfig {
    /// Minimal config of a given kind with all defaults.
    pub fn new(kind: Kind, seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "kind": kind, "seed": seed })).expect("defaults deserialize")
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            ConfigError { field: serde_field(&msg).unwrap_or_else(|| "<document>".into()), line: Some(e.line()), message: msg }
        })?;
        cfg.validate().map_err(|mut e| {
            e.line = line_of(text, &e.field);
            e
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    /// Canonical JSON form (field order fixed by the struct), used for hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn test_function_list(&self) -> Result<Vec<TestFunction>, ConfigError> {
        self.test_functions
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.build().map_err(|e| ConfigError { field: format!("test_functions[{i}].name"), line: None, message: e.to_string() })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |field: &str, message: String| Err(ConfigError { field: field.into(), line: None, message });
        self.potential.build().map_err(|e| ConfigError { field: "potential".into(), line: None, message: e.to_string() })?;
        if self.test_functions.is_empty() {
            return err("test_functions", "at least one test function is required".into());
        }
        self.test_function_list()?;
        for (i, t) in self.test_functions.iter().enumerate() {
            if let Some(s) = t.scale {
                if !(s > 0.0 && s.is_finite()) {
                    return err(&format!("test_functions[{i}].scale"), format!("must be positive, got {s}"));
                }
            }
        }
        let s = &self.sampler;
        if !(s.beta > 0.0 && s.beta.is_finite()) {
            return err("sampler.beta", format!("must be positive, got {}", s.beta));
        }
        if let Some(b) = s.betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return err("sampler.betas", format!("every beta must be positive, got {b}"));
        }
        if s.n == 0 {
            return err("sampler.n", "must be positive".into());
        }
        if s.samples == 0 {
            return err("sampler.samples", "must be positive".into());
        }
        if s.chains == 0 {
            return err("sampler.chains", "must be positive".into());
        }
        if s.thinning == 0 {
            return err("sampler.thinning", "must be at least 1".into());
        }
        if s.source != Source::Mcmc && !matches!(self.potential, PotentialSpec::Quadratic { a } if a == 1.0) {
            return err("sampler.source", "exact Ginibre samples need the quadratic potential with a = 1".into());
        }
        if s.source != Source::Mcmc && s.beta_list().iter().any(|&b| b != 2.0) {
            return err("sampler.source", "exact Ginibre samples exist only at beta = 2".into());
        }
        if !(self.grid.half_width > 0.0 && self.grid.half_width.is_finite()) {
            return err("grid.half_width", format!("must be positive, got {}", self.grid.half_width));
        }
        if self.grid.n < 8 {
            return err("grid.n", format!("need at least 8 cells per side, got {}", self.grid.n));
        }
        match self.kind {
            Kind::IdentitySuite => {
                let r = &self.identity.refine;
                if r.len() != 2 || r[0] >= r[1] {
                    return err("identity.refine", "expected [coarse, fine] with coarse < fine".into());
                }
                if self.identity.n < 2 {
                    return err("identity.n", "need at least two points".into());
                }
            }
            Kind::CltVerify | Kind::Moddev => {
                if let Some(v) = self.clt.variance_tol {
                    if !(v > 0.0) {
                        return err("clt.variance_tol", "must be positive".into());
                    }
                }
                if let Some(a) = self.clt.ks_alpha {
                    if !(0.0..1.0).contains(&a) {
                        return err("clt.ks_alpha", "must lie in [0, 1)".into());
                    }
                }
                if self.kind == Kind::Moddev {
                    let t = &self.moddev.taus;
                    if t.len() < 3 {
                        return err("moddev.taus", "need at least three values".into());
                    }
                    if t.windows(2).any(|w| w[1] <= w[0]) {
                        return err("moddev.taus", "must be strictly increasing".into());
                    }
                }
            }
            Kind::MesoVerify => {
                if self.meso.ns.is_empty() || self.meso.ns.contains(&0) {
                    return err("meso.ns", "need at least one positive N".into());
                }
                if !(self.meso.exponent > 0.0 && self.meso.exponent < 0.5) {
                    return err("meso.exponent", "must lie in (0, 1/2)".into());
                }
            }
            Kind::Minimize => {
                if self.minimize.n < 2 {
                    return err("minimize.n", "need at least two points".into());
                }
                if self.minimize.restarts == 0 {
                    return err("minimize.restarts", "must be positive".into());
                }
            }
            Kind::TransportCheck => {
                let t = &self.transport;
                if t.ts.len() < 2 || t.ts.iter().any(|x| !(*x > 0.0)) {
                    return err("transport.ts", "need at least two positive times".into());
                }
                if t.pushforward_ts.len() < 2 || t.pushforward_ts.iter().any(|x| !(*x > 0.0)) {
                    return err("transport.pushforward_ts", "need at least two positive times".into());
                }
                if !(t.s > 0.0 && t.s < 0.5) {
                    return err("transport.s", format!("must lie in (0, 1/2), got {}", t.s));
                }
                if t.n < 2 {
                    return err("transport.n", "need at least two points".into());
                }
            }
        }
        Ok(())
    }
}

fn d_source() -> Source {
    Source::Ginibre
}
fn d_n() -> usize {
    64
}
fn d_beta() -> f64 {
    2.0
}
fn d_samples() -> usize {
    1000
}
fn d_chains() -> usize {
    8
}
fn d_burn_in() -> usize {
    2000
}
fn d_thinning() -> usize {
    10
}
fn d_half_width() -> f64 {
    3.0
}
fn d_grid_n() -> usize {
    384
}
fn d_identity_n() -> usize {
    16
}
fn d_refine() -> Vec<usize> {
    vec![256, 512]
}
fn d_identity_half() -> f64 {
    1.5
}
fn d_sandwich() -> usize {
    100
}
fn d_var_tol() -> Option<f64> {
    Some(0.1)
}
fn d_ks() -> Option<f64> {
    Some(0.01)
}
fn d_ratio_tol() -> f64 {
    0.15
}
fn d_meso_ns() -> Vec<usize> {
    vec![64, 256]
}
fn d_meso_exp() -> f64 {
    0.25
}
fn d_meso_tol() -> f64 {
    0.15
}
fn d_min_n() -> usize {
    100
}
fn d_restarts() -> usize {
    32
}
fn d_max_iters() -> usize {
    20_000
}
fn d_grad_tol() -> f64 {
    1e-7
}
fn d_min_tol() -> f64 {
    0.05
}
fn d_tr_n() -> usize {
    32
}
fn d_tr_ts() -> Vec<f64> {
    vec![0.01, 0.005, 0.0025]
}
fn d_tr_s() -> f64 {
    0.1
}
fn d_tr_sweep() -> Vec<f64> {
    vec![0.4, 0.2, 0.1]
}
fn d_tr_push_ts() -> Vec<f64> {
    vec![0.02, 0.01, 0.005]
}
fn d_tr_div() -> usize {
    1024
}
fn d_taus() -> Vec<f64> {
    (0..=16).map(|k| -2.0 + 0.25 * k as f64).collect()
}
fn d_potential() -> PotentialSpec {
    PotentialSpec::Quadratic { a: 1.0 }
}
fn d_functions() -> Vec<TestFunctionSpec> {
    vec![TestFunctionSpec::named("bump-center")]
}

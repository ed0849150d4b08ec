//! Linear statistics and their Gaussian limit.
//!
//! `Fluct_N(xi) = sum_i xi(x_i) - N int xi dmu0`. For `xi` smooth and
//! compactly supported it converges in law to a Gaussian with
//! mean `(1/2pi)(1/beta - 1/4) int Delta xi (1_Sigma + (log Delta V)^Sigma)`
//! and variance `(1/2pi beta) int |grad xi^Sigma|^2`, where `f^Sigma` is the
//! bounded harmonic extension of `f` from `Sigma`.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::energy::Configuration;
use crate::equilibrium::EquilibriumData;
use crate::field::harmonic::region_integral;
use crate::field::logpot::cell_log_integral;
use crate::field::{harmonic_extension, log_potential, Grid2D, HarmonicExtension, HarmonicOptions, Mask, Region, ScalarField2D};
use crate::stats;
use crate::test_function::{Regularity, TestFunction};
use crate::{Error, Point, Result};

/// Which form of the limit applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// `supp xi` inside `Sigma`.
    Interior,
    /// `xi` straddles `d Sigma`; needs the harmonic extension.
    Boundary,
    /// `xi_N = xi((x - x_N)/l_N)` with `l_N -> 0`; mean 0.
    Mesoscopic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltPrediction {
    pub mean: f64,
    pub variance: f64,
    pub case: Case,
}

/// Interior if the support sits inside `Sigma`, mesoscopic if tagged so,
/// boundary otherwise.
pub fn classify(xi: &TestFunction, eq: &EquilibriumData) -> Case {
    if xi.regularity == Regularity::C21Mesoscopic {
        Case::Mesoscopic
    } else if xi.support_inside(|p| eq.in_sigma(p)) {
        Case::Interior
    } else {
        Case::Boundary
    }
}

/// Whether the mesoscopic centre lies farther than `4 l_N` from `d Sigma`.
pub fn mesoscopic_margin_ok(xi: &TestFunction, eq: &EquilibriumData) -> bool {
    let r = 4.0 * xi.scale;
    (0..=8).all(|a| {
        (0..64).all(|s| {
            let t = s as f64 * PI / 32.0;
            let rr = r * a as f64 / 8.0;
            eq.in_sigma([xi.center[0] + rr * t.cos(), xi.center[1] + rr * t.sin()])
        })
    })
}

/// Midpoint rule on an `n x n` grid over the bounding square of the support
/// of `xi`; spectrally accurate for smooth compactly supported integrands.
pub fn integrate_on_support(xi: &TestFunction, n: usize, f: impl Fn(Point) -> f64 + Sync) -> f64 {
    let r = xi.support_radius();
    let h = 2.0 * r / n as f64;
    let (cx, cy) = (xi.center[0] - r, xi.center[1] - r);
    (0..n)
        .into_par_iter()
        .map(|j| {
            let y = cy + (j as f64 + 0.5) * h;
            (0..n).map(|i| f([cx + (i as f64 + 0.5) * h, y])).sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        * h
        * h
}

const SUPPORT_NODES: usize = 512;

/// `Fluct_N(xi)` evaluator with `int xi dmu0` computed once.
#[derive(Clone, Debug)]
pub struct LinearStatistic {
    pub xi: TestFunction,
    /// `int xi dmu0`.
    pub expectation: f64,
}

impl LinearStatistic {
    pub fn new(xi: &TestFunction, eq: &EquilibriumData) -> Self {
        Self { xi: xi.clone(), expectation: eq.mu0.integrate(|p| xi.value(p)) }
    }

    pub fn eval(&self, x: &Configuration) -> f64 {
        self.eval_points(&x.points)
    }

    pub fn eval_points(&self, x: &[Point]) -> f64 {
        x.iter().map(|&p| self.xi.value(p)).sum::<f64>() - x.len() as f64 * self.expectation
    }
}

/// `sum_i xi(x_i) - N int xi dmu0`.
pub fn fluct(x: &Configuration, xi: &TestFunction, eq: &EquilibriumData) -> f64 {
    LinearStatistic::new(xi, eq).eval(x)
}

/// Where a batch came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub source: String,
    pub seed: u64,
    pub n: usize,
    pub beta: f64,
    pub xi: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctuationBatch {
    pub values: Vec<f64>,
    pub meta: BatchMeta,
}

impl FluctuationBatch {
    pub fn new(values: Vec<f64>, meta: BatchMeta) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty fluctuation batch".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite fluctuation value".into()));
        }
        Ok(Self { values, meta })
    }

    pub fn mean(&self) -> f64 {
        stats::mean(&self.values)
    }

    pub fn variance(&self) -> f64 {
        stats::variance(&self.values)
    }

    pub fn negated(&self) -> Self {
        Self { values: self.values.iter().map(|v| -v).collect(), meta: self.meta.clone() }
    }

    /// One value per line, plus `<path>.json` with the metadata.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let body: String = self.values.iter().map(|v| format!("{v:.17e}\n")).collect();
        std::fs::write(path, body)?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let values = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| Error::InvalidInput(format!("{path:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let meta = match std::fs::read_to_string(path.with_extension("json")) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(_) => BatchMeta::default(),
        };
        Self::new(values, meta)
    }
}

fn mean_coefficient(beta: f64) -> f64 {
    (1.0 / beta - 0.25) / (2.0 * PI)
}

/// `log Delta V` on `Sigma`, or an error naming the violated positivity.
fn log_lap_v(eq: &EquilibriumData) -> Result<impl Fn(Point) -> f64 + Sync + '_> {
    let v = eq.potential.clone();
    let g = eq.grid();
    for k in 0..g.len() {
        let (i, j) = g.coords(k);
        if eq.sigma.mask.get(i, j) && v.laplacian(g.center(i, j)) <= 0.0 {
            return Err(Error::Assumption(format!(
                "Delta V <= 0 at {:?} on Sigma; the mean needs log Delta V",
                g.center(i, j)
            )));
        }
    }
    Ok(move |p: Point| v.laplacian(p).max(1e-300).ln())
}

/// Whether `log Delta V` is constant on `Sigma` (then its extension is that
/// constant).
fn constant_on_sigma(eq: &EquilibriumData, f: &impl Fn(Point) -> f64) -> Option<f64> {
    let g = eq.grid();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..g.len() {
        let (i, j) = g.coords(k);
        if eq.sigma.mask.get(i, j) {
            let v = f(g.center(i, j));
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (hi - lo <= 1e-12 * hi.abs().max(1.0)).then_some(0.5 * (lo + hi))
}

/// Integral over the whole box of `f`, by the midpoint rule on cell centres.
fn box_integral(g: Grid2D, f: &(dyn Fn(Point) -> f64 + Sync)) -> f64 {
    (0..g.ny)
        .into_par_iter()
        .map(|j| (0..g.nx).map(|i| f(g.center(i, j))).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        * g.cell_area()
}

/// Predicted limiting mean of `Fluct_N(xi)`.
pub fn predicted_mean(xi: &TestFunction, eq: &EquilibriumData, beta: f64, case: Case) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidInput("beta must be positive".into()));
    }
    if case == Case::Mesoscopic {
        return Ok(0.0);
    }
    let coef = mean_coefficient(beta);
    let lv = log_lap_v(eq)?;
    let lap = |p: Point| xi.laplacian(p);
    if case == Case::Interior {
        let s = integrate_on_support(xi, SUPPORT_NODES, |p| lap(p) * (1.0 + lv(p)));
        return Ok(coef * s);
    }
    let on_sigma = region_integral(&eq.sigma, &lap);
    let ext_part = match constant_on_sigma(eq, &lv) {
        // int_{R^2} Delta xi * const = 0
        Some(_) => 0.0,
        None => {
            let ext = harmonic_extension(&lv, &eq.sigma, &HarmonicOptions::default())?;
            let u = &ext.field;
            let inside = region_integral(&eq.sigma, &|p| lap(p) * lv(p));
            let outside = box_integral(eq.grid(), &|p| lap(p) * u.sample(p))
                - region_integral(&eq.sigma, &|p| lap(p) * u.sample(p));
            inside + outside
        }
    };
    Ok(coef * (on_sigma + ext_part))
}

/// Harmonic extension of a test function from `Sigma`.
pub fn extend(xi: &TestFunction, region: &Region) -> Result<HarmonicExtension> {
    harmonic_extension(&|p| xi.value(p), region, &HarmonicOptions::default())
}

/// `int grad xi_a^Sigma . grad xi_b^Sigma` over the plane.
pub fn extension_pairing(a: &TestFunction, b: &TestFunction, region: &Region) -> Result<f64> {
    let ea = extend(a, region)?;
    let eb = if a == b { ea.clone() } else { extend(b, region)? };
    ea.pairing(&eb, &|p| a.value(p), &|p| a.gradient(p), &|p| b.value(p), &|p| b.gradient(p))
}

fn grad_dot(a: &TestFunction, b: &TestFunction, p: Point) -> f64 {
    let (ga, gb) = (a.gradient(p), b.gradient(p));
    ga[0] * gb[0] + ga[1] * gb[1]
}

/// `int |grad xi|^2` over the plane for compactly supported `xi`.
pub fn dirichlet_integral(xi: &TestFunction) -> f64 {
    integrate_on_support(xi, SUPPORT_NODES, |p| grad_dot(xi, xi, p))
}

/// Predicted limiting variance `(1/2pi beta) int |grad xi^Sigma|^2`.
pub fn predicted_variance(xi: &TestFunction, eq: &EquilibriumData, beta: f64, case: Case) -> Result<f64> {
    predicted_covariance_case(xi, xi, eq, beta, case)
}

fn predicted_covariance_case(
    a: &TestFunction,
    b: &TestFunction,
    eq: &EquilibriumData,
    beta: f64,
    case: Case,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidInput("beta must be positive".into()));
    }
    let e = match case {
        Case::Interior | Case::Mesoscopic => {
            // both supports are compact; integrate over the smaller one
            let s = if a.support_radius() <= b.support_radius() { a } else { b };
            integrate_on_support(s, SUPPORT_NODES, |p| grad_dot(a, b, p))
        }
        Case::Boundary => extension_pairing(a, b, &eq.sigma)?,
    };
    Ok(e / (2.0 * PI * beta))
}

/// Predicted limiting covariance `(1/2pi beta) int grad xi_a^Sigma . grad xi_b^Sigma`.
pub fn predicted_covariance(a: &TestFunction, b: &TestFunction, eq: &EquilibriumData, beta: f64) -> Result<f64> {
    let case = match (classify(a, eq), classify(b, eq)) {
        (Case::Boundary, _) | (_, Case::Boundary) => Case::Boundary,
        _ => Case::Interior,
    };
    predicted_covariance_case(a, b, eq, beta, case)
}

pub fn predict(xi: &TestFunction, eq: &EquilibriumData, beta: f64) -> Result<CltPrediction> {
    let case = classify(xi, eq);
    Ok(CltPrediction {
        mean: predicted_mean(xi, eq, beta, case)?,
        variance: predicted_variance(xi, eq, beta, case)?,
        case,
    })
}

/// Variance at `beta = 2` for `Sigma` the unit disk centred at the origin, by
/// the Fourier form `(1/4pi) int_disk |grad xi|^2 + (1/2) sum_k |k| |xi_k|^2`
/// with `xi_k` the Fourier coefficients of `xi` on the unit circle.
/// Independent of the grid: polar Gauss-Legendre inside, FFT on the circle.
pub fn rider_virag_variance(xi: &TestFunction) -> f64 {
    let m = 1024;
    let mut buf: Vec<Complex<f64>> = (0..m)
        .map(|s| {
            let t = 2.0 * PI * s as f64 / m as f64;
            Complex::new(xi.value([t.cos(), t.sin()]), 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let mut circle = 0.0;
    for (k, c) in buf.iter().enumerate() {
        let kk = if k <= m / 2 { k } else { m - k } as f64;
        circle += kk * (c / m as f64).norm_sqr();
    }
    let (nodes, weights) = crate::energy::gauss_legendre(64);
    let nt = 256;
    let mut disk = 0.0;
    for (s, w) in nodes.iter().zip(&weights) {
        // radius on [0, 1]
        let r = 0.5 * (s + 1.0);
        let mut ring = 0.0;
        for a in 0..nt {
            let t = 2.0 * PI * a as f64 / nt as f64;
            let g = xi.gradient([r * t.cos(), r * t.sin()]);
            ring += g[0] * g[0] + g[1] * g[1];
        }
        disk += 0.5 * w * r * ring * 2.0 * PI / nt as f64;
    }
    disk / (4.0 * PI) + 0.5 * circle
}

/// Outward flux of `xi^Sigma` through each connected component of the
/// region, measured on the boundary of the component dilated by `dilation`
/// cells, where the extension is harmonic. Zero for every component is the
/// condition under which the Gaussian limit holds on a disconnected support.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub fluxes: Vec<f64>,
    /// `int |Delta xi|` over the plane, the natural scale of the fluxes.
    pub scale: f64,
}

impl CompatibilityReport {
    pub fn satisfied(&self, rel_tol: f64) -> bool {
        self.fluxes.iter().all(|f| f.abs() <= rel_tol * self.scale.max(1e-300))
    }
}

pub fn check_compatibility_region(xi: &TestFunction, region: &Region) -> Result<CompatibilityReport> {
    let ext = extend(xi, region)?;
    let g = region.grid();
    let (labels, count) = region.mask.components();
    let dilation = 3;
    let mut fluxes = Vec::with_capacity(count);
    for c in 0..count {
        let comp = Mask { grid: g, cells: labels.iter().map(|l| *l == Some(c)).collect() };
        let d = comp.dilate(dilation);
        // the dilated component must not touch another component
        if (0..g.len()).any(|k| d.cells[k] && labels[k].is_some_and(|l| l != c)) {
            return Err(Error::InvalidInput("components closer than the flux contour".into()));
        }
        let u = &ext.field.values;
        let mut flux = 0.0;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.index(i, j);
                for (a, b) in [(i + 1, j), (i, j + 1)] {
                    if a >= g.nx || b >= g.ny {
                        continue;
                    }
                    let m = g.index(a, b);
                    match (d.cells[k], d.cells[m]) {
                        (true, false) => flux += u[m] - u[k],
                        (false, true) => flux += u[k] - u[m],
                        _ => {}
                    }
                }
            }
        }
        fluxes.push(flux);
    }
    let scale = box_integral(g, &|p| xi.laplacian(p).abs());
    Ok(CompatibilityReport { fluxes, scale })
}

pub fn check_compatibility(xi: &TestFunction, eq: &EquilibriumData) -> Result<CompatibilityReport> {
    check_compatibility_region(xi, &eq.sigma)
}

/// `log mean exp(tau v)` over a sample, with a jackknife standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceEstimate {
    pub tau: f64,
    pub value: f64,
    pub se: f64,
    /// `(sum w)^2 / sum w^2` for the weights `exp(tau v)`.
    pub effective_size: f64,
}

fn log_mean_exp(v: &[f64], tau: f64) -> f64 {
    let m = v.iter().map(|x| tau * x).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|x| (tau * x - m).exp()).sum();
    m + (s / v.len() as f64).ln()
}

pub fn estimate_laplace(batch: &FluctuationBatch, tau: f64) -> LaplaceEstimate {
    let v = &batch.values;
    if tau == 0.0 {
        return LaplaceEstimate { tau, value: 0.0, se: 0.0, effective_size: v.len() as f64 };
    }
    let (value, se) = stats::jackknife(v, |x| log_mean_exp(x, tau));
    let m = v.iter().map(|x| tau * x).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = v.iter().map(|x| (tau * x - m).exp()).collect();
    let s1: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    LaplaceEstimate { tau, value, se, effective_size: s1 * s1 / s2 }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub n: usize,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub sample_mean: f64,
    pub sample_variance: f64,
    pub skewness: f64,
    pub skewness_se: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_se: f64,
    pub predicted: CltPrediction,
}

/// Kolmogorov-Smirnov test of the batch against the predicted Gaussian.
pub fn gaussianity_test(batch: &FluctuationBatch, pred: &CltPrediction) -> Result<GaussianityReport> {
    let n = batch.values.len();
    if n < 200 {
        return Err(Error::InvalidInput(format!("gaussianity test needs at least 200 values, got {n}")));
    }
    let var = batch.variance();
    if !(var > 0.0) {
        return Err(Error::InvalidInput("degenerate batch: zero variance".into()));
    }
    let ks = stats::ks_normal(&batch.values, pred.mean, pred.variance)?;
    let (skewness, skewness_se) = stats::skewness(&batch.values);
    let (excess_kurtosis, kurtosis_se) = stats::excess_kurtosis(&batch.values);
    Ok(GaussianityReport {
        n,
        ks_statistic: ks.statistic,
        p_value: ks.p_value,
        sample_mean: batch.mean(),
        sample_variance: var,
        skewness,
        skewness_se,
        excess_kurtosis,
        kurtosis_se,
        predicted: *pred,
    })
}

/// Plot-ready empirical CDF against the Gaussian CDF: `(x, F_emp, F_gauss)`.
pub fn ecdf_table(batch: &FluctuationBatch, pred: &CltPrediction) -> Vec<(f64, f64, f64)> {
    let mut v = batch.values.clone();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(k, &x)| (x, (k + 1) as f64 / n, stats::normal_cdf(x, pred.mean, pred.variance)))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailRow {
    pub level: f64,
    pub frequency: f64,
    pub frequency_se: f64,
    /// `2 exp(-(a - c)^2 / 4c)` for `a > c`, else 1: the Chernoff bound implied
    /// by `log E exp(tau Fluct) <= c (tau^2 + |tau|)`.
    pub bound: f64,
    pub consistent: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModerateDeviationReport {
    pub laplace: Vec<LaplaceEstimate>,
    /// Least-squares fit of `L(tau)` against `tau^2`.
    pub c_fit: f64,
    /// Smallest `c` with `|L(tau)| <= c (tau^2 + |tau|)` on the grid.
    pub c_min: f64,
    /// `|L(tau)| <= c_fit (tau^2 + |tau|) + 3 se` at every grid point.
    pub bound_holds: bool,
    /// Second differences of `L` on the (uniform) grid are `>= -se`.
    pub convex: bool,
    pub min_second_difference: f64,
    pub tails: Vec<TailRow>,
    pub tails_consistent: bool,
    pub min_effective_size: f64,
}

/// Moderate-deviation diagnostics on a uniform `tau` grid.
pub fn moderate_deviation_check(batch: &FluctuationBatch, taus: &[f64]) -> Result<ModerateDeviationReport> {
    if taus.len() < 3 {
        return Err(Error::InvalidInput("need at least three tau values".into()));
    }
    let laplace: Vec<LaplaceEstimate> = taus.iter().map(|&t| estimate_laplace(batch, t)).collect();
    let (mut num, mut den) = (0.0, 0.0);
    let mut c_min: f64 = 0.0;
    for l in &laplace {
        let t2 = l.tau * l.tau;
        num += t2 * l.value;
        den += t2 * t2;
        if l.tau != 0.0 {
            c_min = c_min.max(l.value.abs() / (t2 + l.tau.abs()));
        }
    }
    let c_fit = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    let bound_holds =
        laplace.iter().all(|l| l.value.abs() <= c_fit * (l.tau * l.tau + l.tau.abs()) + 3.0 * l.se + 1e-14);
    let mut min_second_difference = f64::INFINITY;
    let mut convex = true;
    for w in laplace.windows(3) {
        let d2 = w[0].value - 2.0 * w[1].value + w[2].value;
        let se = (w[0].se.powi(2) + 4.0 * w[1].se.powi(2) + w[2].se.powi(2)).sqrt();
        min_second_difference = min_second_difference.min(d2);
        if d2 < -se {
            convex = false;
        }
    }
    let n = batch.values.len() as f64;
    let sd = batch.variance().sqrt();
    let mut tails = Vec::new();
    for k in 1..=8 {
        let a = 0.5 * k as f64 * sd;
        let count = batch.values.iter().filter(|v| v.abs() >= a).count() as f64;
        // estimable: at least ten exceedances
        if count < 10.0 {
            break;
        }
        let f = count / n;
        let se = (f * (1.0 - f) / n).sqrt();
        let bound = if c_fit > 0.0 && a > c_fit { (2.0 * (-(a - c_fit).powi(2) / (4.0 * c_fit)).exp()).min(1.0) } else { 1.0 };
        tails.push(TailRow { level: a, frequency: f, frequency_se: se, bound, consistent: f <= bound + 3.0 * se });
    }
    let tails_consistent = tails.iter().all(|t| t.consistent);
    let min_effective_size = laplace.iter().map(|l| l.effective_size).fold(f64::INFINITY, f64::min);
    Ok(ModerateDeviationReport {
        laplace,
        c_fit,
        c_min,
        bound_holds,
        convex,
        min_second_difference,
        tails,
        tails_consistent,
        min_effective_size,
    })
}

/// `Delta^{-1} fluct_N = (1/2pi)(sum_i -log|y - x_i| - N h^{mu0}(y))` on a
/// grid. Cells within two cells of a charge use cell-averaged logarithms;
/// their count is returned alongside the field.
pub fn gff_field(x: &[Point], eq: &EquilibriumData, grid: Grid2D) -> (ScalarField2D, usize) {
    let h_mu = if grid == eq.grid() { eq.h_mu.clone() } else { log_potential(&eq.mu0, &grid) };
    let n = x.len() as f64;
    let hs = grid.spacing;
    let area = grid.cell_area();
    let near = 2.0 * hs;
    let mut flagged = 0;
    let mut values = vec![0.0; grid.len()];
    for (k, v) in values.iter_mut().enumerate() {
        let c = grid.center_of(k);
        let mut s = 0.0;
        let mut averaged = false;
        for &p in x {
            let (dx, dy) = (c[0] - p[0], c[1] - p[1]);
            if dx.abs() <= near && dy.abs() <= near {
                // cell average of -log|y - p|
                s += cell_log_integral(dx, dy, hs) / area;
                averaged = true;
            } else {
                s -= 0.5 * (dx * dx + dy * dy).ln();
            }
        }
        if averaged {
            flagged += 1;
        }
        *v = (s - n * h_mu.values[k]) / (2.0 * PI);
    }
    (ScalarField2D { grid, values }, flagged)
}

/// `int grad xi . grad (Delta^{-1} fluct_N)`, evaluated after integrating by
/// parts as `-int Delta xi * gff`; equals `Fluct_N(xi)` up to quadrature.
pub fn gff_pairing(xi: &TestFunction, gff: &ScalarField2D) -> f64 {
    let g = gff.grid;
    -(0..g.len()).map(|k| xi.laplacian(g.center_of(k)) * gff.values[k]).sum::<f64>() * g.cell_area()
}

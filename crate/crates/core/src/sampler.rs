//! Configurations: Metropolis sampling of the Gibbs measure, exact Ginibre
//! eigenvalues at `beta = 2`, and energy minimization.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{hamiltonian, Configuration};
use crate::potential::Potential;
use crate::rng::{self, Rng};
use crate::{Error, Point, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n: usize,
    pub beta: f64,
    pub proposal_sigma: f64,
    pub burn_in: usize,
    pub thinning: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Robbins-Monro adaptation of the proposal scale during burn-in.
    pub adapt: bool,
    /// Chain index: selects the random stream under `seed`.
    #[serde(default)]
    pub chain: u64,
}

impl SamplerConfig {
    /// Defaults: burn-in 2000 sweeps, thinning 10, adaptive proposal.
    pub fn new(n: usize, beta: f64, n_samples: usize, seed: u64) -> Self {
        Self {
            n,
            beta,
            proposal_sigma: 0.5 / (n as f64).sqrt(),
            burn_in: 2000,
            thinning: 10,
            n_samples,
            seed,
            adapt: true,
            chain: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.proposal_sigma > 0.0) {
            return bad("proposal_sigma must be positive");
        }
        if self.thinning == 0 {
            return bad("thinning must be at least 1");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1");
        }
        Ok(())
    }
}

/// How initial points are drawn.
#[derive(Clone)]
pub enum Init {
    Disk { center: Point, radius: f64 },
    Box { lo: Point, hi: Point },
    /// Rejection sampling from a box restricted by a membership test.
    Region { lo: Point, hi: Point, inside: Arc<dyn Fn(Point) -> bool + Send + Sync> },
    Points(Vec<Point>),
}

impl Init {
    /// Uniform on the droplet of an equilibrium.
    pub fn from_equilibrium(eq: &crate::equilibrium::EquilibriumData) -> Self {
        let g = eq.grid();
        let sigma = eq.sigma.clone();
        let grid = g;
        Init::Region {
            lo: g.origin,
            hi: g.upper(),
            inside: Arc::new(move |p| match &sigma.level {
                Some(l) => grid.contains(p) && l.value(p) <= 0.0,
                None => grid.cell_of(p).is_some_and(|(i, j)| sigma.mask.get(i, j)),
            }),
        }
    }

    fn draw(&self, n: usize, rng: &mut Rng) -> Vec<Point> {
        match self {
            Init::Disk { center, radius } => (0..n)
                .map(|_| {
                    let r = radius * rng.random::<f64>().sqrt();
                    let t = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                    [center[0] + r * t.cos(), center[1] + r * t.sin()]
                })
                .collect(),
            Init::Box { lo, hi } => {
                (0..n).map(|_| [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])]).collect()
            }
            Init::Region { lo, hi, inside } => (0..n)
                .map(|_| loop {
                    let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
                    if inside(p) {
                        break p;
                    }
                })
                .collect(),
            Init::Points(p) => p.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub config: Configuration,
    /// Cached `H_N(config)`.
    pub energy: f64,
    pub accepted: u64,
    pub proposed: u64,
    /// Proposals that landed exactly on another particle.
    pub coincident: u64,
}

impl ChainState {
    pub fn new(config: Configuration, v: &dyn Potential) -> Result<Self> {
        let energy = hamiltonian(&config, v)?;
        Ok(Self { config, energy, accepted: 0, proposed: 0, coincident: 0 })
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.proposed.max(1) as f64
    }

    /// Recomputes the cached energy; returns the drift that was removed.
    pub fn resync(&mut self, v: &dyn Potential) -> Result<f64> {
        let e = hamiltonian(&self.config, v)?;
        let drift = (e - self.energy).abs();
        self.energy = e;
        Ok(drift)
    }
}

/// Metropolis acceptance probability `min(1, exp(-beta/2 dH))`.
pub fn acceptance_probability(delta_h: f64, beta: f64) -> f64 {
    if delta_h <= 0.0 {
        1.0
    } else {
        (-0.5 * beta * delta_h).exp()
    }
}

/// `2 sum_{j != i} (log|x_i - x_j| - log|y - x_j|)`, i.e. the pair part of
/// `H(y) - H(x_i)` for a move of particle `i` to `y`. Ratios of squared
/// distances are multiplied in blocks to save logarithms. `None` if `y`
/// coincides with another particle.
fn pair_delta(points: &[Point], i: usize, y: Point) -> Option<f64> {
    let xi = points[i];
    let mut s = 0.0;
    let mut prod = 1.0;
    let mut count = 0;
    for (j, &p) in points.iter().enumerate() {
        if j == i {
            continue;
        }
        let dn = crate::dist2(y, p);
        if dn == 0.0 {
            return None;
        }
        let r = crate::dist2(xi, p) / dn;
        prod *= r;
        count += 1;
        if count == 8 {
            if prod.is_normal() && (1e-250..1e250).contains(&prod) {
                s += prod.ln();
            } else {
                return Some(pair_delta_plain(points, i, y));
            }
            prod = 1.0;
            count = 0;
        }
    }
    Some(s + prod.ln())
}

fn pair_delta_plain(points: &[Point], i: usize, y: Point) -> f64 {
    let xi = points[i];
    points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &p)| crate::dist2(xi, p).ln() - crate::dist2(y, p).ln())
        .sum()
}

/// One sweep: every particle, in random order, proposes a Gaussian move of
/// scale `sigma` accepted with probability `min(1, exp(-beta/2 dH))`.
pub fn metropolis_sweep(state: &mut ChainState, beta: f64, sigma: f64, v: &dyn Potential, rng: &mut Rng) {
    let n = state.config.n();
    let nf = n as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for i in order {
        let xi = state.config.points[i];
        let gx: f64 = StandardNormal.sample(rng);
        let gy: f64 = StandardNormal.sample(rng);
        let y = [xi[0] + sigma * gx, xi[1] + sigma * gy];
        state.proposed += 1;
        let Some(dp) = pair_delta(&state.config.points, i, y) else {
            state.coincident += 1;
            continue;
        };
        let dh = dp + nf * (v.value(y) - v.value(xi));
        let u: f64 = rng.random();
        if u < acceptance_probability(dh, beta) {
            state.config.points[i] = y;
            state.energy += dh;
            state.accepted += 1;
        }
    }
}

/// Metropolis kernel on a finite state space with symmetric proposal matrix
/// `q` (rows sum to at most 1): `K(a, b) = q(a, b) min(1, pi(b)/pi(a))`,
/// rejected mass on the diagonal.
pub fn discrete_kernel(energies: &[f64], q: &[Vec<f64>], beta: f64) -> Vec<Vec<f64>> {
    let m = energies.len();
    let mut k = vec![vec![0.0; m]; m];
    for a in 0..m {
        let mut off = 0.0;
        for b in 0..m {
            if a != b {
                k[a][b] = q[a][b] * acceptance_probability(energies[b] - energies[a], beta);
                off += k[a][b];
            }
        }
        k[a][a] = 1.0 - off;
    }
    k
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainSummary {
    pub acceptance_rate: f64,
    pub burn_in_acceptance: f64,
    pub final_sigma: f64,
    /// Largest `|cached - recomputed|` relative to `|H_N|` at the resyncs.
    pub max_relative_drift: f64,
    /// Integrated autocorrelation time (in samples) of the energy trace.
    pub energy_autocorrelation: f64,
    pub coincident_proposals: u64,
}

/// Runs one chain: burn-in (with optional adaptation of the proposal scale
/// towards acceptance 0.3), then `n_samples` configurations every `thinning`
/// sweeps, each passed to `emit`. Deterministic given the config.
pub fn run_chain_with(
    cfg: &SamplerConfig,
    v: &dyn Potential,
    init: &Init,
    mut emit: impl FnMut(usize, &Configuration),
) -> Result<ChainSummary> {
    cfg.validate()?;
    let mut rng = rng::tagged(cfg.seed, rng::purpose::MCMC, cfg.chain);
    let pts = init.draw(cfg.n, &mut rng);
    let mut state = ChainState::new(Configuration::new(pts)?, v)?;
    let mut log_sigma = cfg.proposal_sigma.ln();
    let mut drift: f64 = 0.0;
    let mut sweeps = 0usize;
    let mut check = |state: &mut ChainState, sweeps: usize| -> Result<()> {
        if sweeps % 100 == 0 {
            let d = state.resync(v)?;
            drift = drift.max(d / state.energy.abs().max(1.0));
        }
        Ok(())
    };
    for k in 0..cfg.burn_in {
        let (a0, p0) = (state.accepted, state.proposed);
        metropolis_sweep(&mut state, cfg.beta, log_sigma.exp(), v, &mut rng);
        sweeps += 1;
        check(&mut state, sweeps)?;
        if cfg.adapt {
            let rate = (state.accepted - a0) as f64 / (state.proposed - p0).max(1) as f64;
            log_sigma += (rate - 0.3) / ((k + 1) as f64).powf(0.6);
        }
    }
    let burn_in_acceptance = state.acceptance_rate();
    let (a0, p0) = (state.accepted, state.proposed);
    let sigma = log_sigma.exp();
    let mut trace = Vec::with_capacity(cfg.n_samples);
    for s in 0..cfg.n_samples {
        for _ in 0..cfg.thinning {
            metropolis_sweep(&mut state, cfg.beta, sigma, v, &mut rng);
            sweeps += 1;
            check(&mut state, sweeps)?;
        }
        trace.push(state.energy);
        emit(s, &state.config);
    }
    Ok(ChainSummary {
        acceptance_rate: (state.accepted - a0) as f64 / (state.proposed - p0).max(1) as f64,
        burn_in_acceptance,
        final_sigma: sigma,
        max_relative_drift: drift,
        energy_autocorrelation: crate::stats::integrated_autocorrelation(&trace),
        coincident_proposals: state.coincident,
    })
}

/// [`run_chain_with`] collecting the samples.
pub fn run_chain(cfg: &SamplerConfig, v: &dyn Potential, init: &Init) -> Result<(Vec<Configuration>, ChainSummary)> {
    let mut out = Vec::with_capacity(cfg.n_samples);
    let s = run_chain_with(cfg, v, init, |_, c| out.push(c.clone()))?;
    Ok((out, s))
}

/// Runs `chains` independent chains (streams `0..chains`) in parallel and
/// maps every sample through `f`; results are ordered by chain, then sample.
pub fn run_chains_map<T: Send>(
    cfg: &SamplerConfig,
    v: &dyn Potential,
    init: &Init,
    chains: usize,
    f: impl Fn(&Configuration) -> T + Sync,
) -> Result<(Vec<T>, Vec<ChainSummary>)> {
    let parts: Vec<Result<(Vec<T>, ChainSummary)>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let cfg = SamplerConfig { chain: c as u64, ..cfg.clone() };
            let mut out = Vec::with_capacity(cfg.n_samples);
            let s = run_chain_with(&cfg, v, init, |_, x| out.push(f(x)))?;
            Ok((out, s))
        })
        .collect();
    let mut vals = Vec::new();
    let mut sums = Vec::new();
    for p in parts {
        let (v, s) = p?;
        vals.extend(v);
        sums.push(s);
    }
    Ok((vals, sums))
}

/// Eigenvalues of an `N x N` matrix of i.i.d. standard complex Gaussians
/// (real and imaginary parts `Normal(0, 1/2)`), scaled by `1/sqrt(N)`: an exact
/// sample of the `beta = 2` gas with `V = |x|^2`.
pub fn sample_ginibre(n: usize, rng: &mut Rng) -> Result<Configuration> {
    if n == 0 {
        return Err(Error::InvalidInput("N must be positive".into()));
    }
    let s = 0.5f64.sqrt();
    let mut entries = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        entries.push(faer::c64::new(a * s, b * s));
    }
    let m = faer::Mat::<faer::c64>::from_fn(n, n, |i, j| entries[j * n + i]);
    let ev = m.eigenvalues().map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let scale = 1.0 / (n as f64).sqrt();
    Configuration::new(ev.iter().map(|z| [z.re * scale, z.im * scale]).collect())
}

/// `count` Ginibre samples, sample `k` drawn from stream `k` under `seed`.
pub fn ginibre_batch(n: usize, count: usize, seed: u64) -> Result<Vec<Configuration>> {
    (0..count)
        .into_par_iter()
        .map(|k| sample_ginibre(n, &mut rng::tagged(seed, rng::purpose::GINIBRE, k as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizerConfig {
    pub max_iters: usize,
    /// First trial step; later steps follow the Barzilai-Borwein rule.
    pub initial_step: f64,
    /// Stop when `||grad H_N||_inf / N` falls below this.
    pub grad_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for MinimizerConfig {
    fn default() -> Self {
        Self { max_iters: 20_000, initial_step: 1e-4, grad_tol: 1e-7, restarts: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinimizerResult {
    pub config: Configuration,
    pub energy: f64,
    /// `||grad H_N||_inf / N` at the returned configuration.
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Final energy of every restart.
    pub restart_energies: Vec<f64>,
}

/// `grad_{x_i} H_N = -2 sum_{j != i} (x_i - x_j)/|x_i - x_j|^2 + N grad V(x_i)`.
pub fn hamiltonian_gradient(x: &[Point], v: &dyn Potential) -> Vec<[f64; 2]> {
    let nf = x.len() as f64;
    (0..x.len())
        .map(|i| {
            let mut g = v.gradient(x[i]);
            g[0] *= nf;
            g[1] *= nf;
            for (j, &p) in x.iter().enumerate() {
                if j != i {
                    let d = [x[i][0] - p[0], x[i][1] - p[1]];
                    let r2 = d[0] * d[0] + d[1] * d[1];
                    g[0] -= 2.0 * d[0] / r2;
                    g[1] -= 2.0 * d[1] / r2;
                }
            }
            g
        })
        .collect()
}

fn energy_or_inf(x: &[Point], v: &dyn Potential) -> f64 {
    Configuration::new(x.to_vec()).and_then(|c| hamiltonian(&c, v)).unwrap_or(f64::INFINITY)
}

fn descend(mut x: Vec<Point>, v: &dyn Potential, cfg: &MinimizerConfig) -> (Vec<Point>, f64, f64, usize) {
    let n = x.len();
    let nf = n as f64;
    let mut e = energy_or_inf(&x, v);
    let mut g = hamiltonian_gradient(&x, v);
    let mut step = cfg.initial_step;
    let gnorm = |g: &[[f64; 2]]| g.iter().map(|d| d[0].abs().max(d[1].abs())).fold(0.0, f64::max) / nf;
    let mut it = 0;
    while it < cfg.max_iters {
        if gnorm(&g) <= cfg.grad_tol {
            break;
        }
        it += 1;
        let g2: f64 = g.iter().map(|d| d[0] * d[0] + d[1] * d[1]).sum();
        // Armijo backtracking from the current trial step
        let mut t = step;
        let (xn, en) = loop {
            let xn: Vec<Point> = x.iter().zip(&g).map(|(p, d)| [p[0] - t * d[0], p[1] - t * d[1]]).collect();
            let en = energy_or_inf(&xn, v);
            if en <= e - 1e-4 * t * g2 {
                break (xn, en);
            }
            t *= 0.5;
            if t < 1e-20 {
                return (x, e, gnorm(&g), it);
            }
        };
        let gn = hamiltonian_gradient(&xn, v);
        // Barzilai-Borwein step for the next iteration
        let (mut ss, mut sy) = (0.0, 0.0);
        for k in 0..n {
            for c in 0..2 {
                let s = xn[k][c] - x[k][c];
                let y = gn[k][c] - g[k][c];
                ss += s * s;
                sy += s * y;
            }
        }
        step = if sy > 0.0 { (ss / sy).min(1e3 * t) } else { 2.0 * t };
        x = xn;
        e = en;
        g = gn;
    }
    let gn = gnorm(&g);
    (x, e, gn, it)
}

/// Gradient descent on `H_N` with backtracking line search from `restarts`
/// independent initializations (run in parallel); returns the lowest energy.
pub fn minimize_energy(n: usize, v: &dyn Potential, init: &Init, cfg: &MinimizerConfig) -> Result<MinimizerResult> {
    if n == 0 || cfg.restarts == 0 || !(cfg.grad_tol > 0.0) {
        return Err(Error::InvalidInput("minimizer needs N >= 1, restarts >= 1, grad_tol > 0".into()));
    }
    let runs: Vec<(Vec<Point>, f64, f64, usize)> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::tagged(cfg.seed, rng::purpose::MINIMIZER, r as u64);
            descend(init.draw(n, &mut rng), v, cfg)
        })
        .collect();
    let restart_energies: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let best = runs.into_iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("restarts >= 1");
    Ok(MinimizerResult {
        config: Configuration::new(best.0)?,
        energy: best.1,
        grad_norm: best.2,
        converged: best.2 <= cfg.grad_tol,
        iterations: best.3,
        restart_energies,
    })
}

/// Points that leave the droplet `Sigma` dilated by one grid cell, with their
/// distance to the nearest droplet cell.
pub fn confinement_violations(x: &[Point], eq: &crate::equilibrium::EquilibriumData) -> Vec<(usize, f64)> {
    let g = eq.grid();
    let mask = eq.sigma_mask();
    let cells: Vec<Point> = (0..g.len())
        .filter(|&k| {
            let (i, j) = g.coords(k);
            mask.get(i, j)
        })
        .map(|k| g.center_of(k))
        .collect();
    // a cell centre within h/sqrt2 + h of the point puts it in the dilated set
    let reach = g.spacing * (1.0 + std::f64::consts::FRAC_1_SQRT_2);
    x.iter()
        .enumerate()
        .filter(|&(_, &p)| !eq.in_sigma(p))
        .filter_map(|(i, &p)| {
            let d = cells.iter().map(|&c| crate::dist2(p, c)).fold(f64::INFINITY, f64::min).sqrt();
            (d > reach).then_some((i, d))
        })
        .collect()
}

/// [`minimize_energy`] followed by the confinement assertion: every returned
/// point must lie in `Sigma` up to one grid cell.
pub fn minimize_confined(
    n: usize,
    v: &dyn Potential,
    eq: &crate::equilibrium::EquilibriumData,
    cfg: &MinimizerConfig,
) -> Result<MinimizerResult> {
    let res = minimize_energy(n, v, &Init::from_equilibrium(eq), cfg)?;
    let bad = confinement_violations(&res.config.points, eq);
    if let Some(&(i, d)) = bad.first() {
        return Err(Error::Assumption(format!(
            "{} minimizer points outside the droplet, e.g. point {i} at distance {d:.3e}",
            bad.len()
        )));
    }
    Ok(res)
}

/// JSON sidecar written next to a sample stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StreamMeta {
    pub config: SamplerConfig,
    pub summaries: Vec<ChainSummary>,
    pub records: usize,
    pub format: String,
}

/// Writes samples as CSV, one record per line: `N, x_1, y_1, ..., x_N, y_N`,
/// plus `<path>.json` with the sidecar.
pub fn write_samples_csv(path: &std::path::Path, samples: &[Configuration], meta: &StreamMeta) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in samples {
        write!(w, "{}", c.n())?;
        for p in &c.points {
            write!(w, ",{:e},{:e}", p[0], p[1])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    write_sidecar(path, meta)
}

pub fn read_samples_csv(path: &std::path::Path) -> Result<Vec<Configuration>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |l: usize| Error::InvalidInput(format!("{}: malformed record on line {}", path.display(), l + 1));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(ln, l)| {
            let mut it = l.split(',');
            let n: usize = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad(ln))?;
            let v: Vec<f64> = it.map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad(ln))?;
            if v.len() != 2 * n {
                return Err(bad(ln));
            }
            Configuration::new(v.chunks(2).map(|c| [c[0], c[1]]).collect())
        })
        .collect()
}

/// Little-endian binary records: `u64 N` then `2N` `f64` coordinates.
pub fn write_samples_binary(path: &std::path::Path, samples: &[Configuration], meta: &StreamMeta) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in samples {
        w.write_all(&(c.n() as u64).to_le_bytes())?;
        for p in &c.points {
            w.write_all(&p[0].to_le_bytes())?;
            w.write_all(&p[1].to_le_bytes())?;
        }
    }
    w.flush()?;
    write_sidecar(path, meta)
}

pub fn read_samples_binary(path: &std::path::Path) -> Result<Vec<Configuration>> {
    let bytes = std::fs::read(path)?;
    let word = |k: usize| -> Result<[u8; 8]> {
        bytes
            .get(k..k + 8)
            .map(|s| s.try_into().expect("8 bytes"))
            .ok_or_else(|| Error::InvalidInput(format!("{}: truncated record", path.display())))
    };
    let mut out = Vec::new();
    let mut k = 0;
    while k < bytes.len() {
        let n = u64::from_le_bytes(word(k)?) as usize;
        k += 8;
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let x = f64::from_le_bytes(word(k)?);
            let y = f64::from_le_bytes(word(k + 8)?);
            pts.push([x, y]);
            k += 16;
        }
        out.push(Configuration::new(pts)?);
    }
    Ok(out)
}

fn write_sidecar(path: &std::path::Path, meta: &StreamMeta) -> Result<()> {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    std::fs::write(p, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

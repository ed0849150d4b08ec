//! The experiments behind each subcommand. Each returns a [`Report`] of
//! checks, metrics and tables; artifacts under `fields/` are written only
//! when a directory is given.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use anyhow::{bail, Context, Result};
use coulomb_core::energy::{
    nn_truncation, smeared_correction, splitting_residual, truncated_energy_identity, Background, Configuration,
};
use coulomb_core::equilibrium::{
    perturbed_equilibrium, quadratic_closed_form, radial_support_radius, solve_equilibrium, EquilibriumData,
    SolveOptions,
};
use coulomb_core::field::{Grid2D, VectorField2D};
use coulomb_core::fluctuations::{
    classify, ecdf_table, gaussianity_test, mesoscopic_margin_ok, moderate_deviation_check, predicted_mean,
    predicted_variance, rider_virag_variance, Case, CltPrediction, FluctuationBatch, LinearStatistic,
};
use coulomb_core::potential::{Potential, PotentialSpec};
use coulomb_core::rng;
use coulomb_core::sampler::{
    confinement_violations, ginibre_batch, minimize_energy, run_chains_map, Init, MinimizerConfig, SamplerConfig,
};
use coulomb_core::stats;
use coulomb_core::test_function::{boundary_library, TestFunction};
use coulomb_core::transport::{
    anisotropy, anisotropy_matrix, approx_family, build_psi_boundary, build_psi_interior, energy_transport_check,
    interior_density_distance, pushforward_density, transported_divergence_check, Reference, TransportCheckOptions,
    UniformDisk,
};
use coulomb_core::Point;
use rand::{Rng as _, RngCore as _};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Kind, Source};
use crate::report::{Check, Metric, Report, Table};

/// Runs the experiment named by `cfg.kind`.
pub fn run(cfg: &ExperimentConfig, fields: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    match cfg.kind {
        Kind::IdentitySuite => identity_suite(cfg, fields),
        Kind::CltVerify => clt_verify(cfg, fields),
        Kind::MesoVerify => meso_verify(cfg),
        Kind::Minimize => minimize(cfg, fields),
        Kind::TransportCheck => transport_check(cfg, fields),
        Kind::Moddev => moddev(cfg),
    }
}

fn grid(cfg: &ExperimentConfig) -> Grid2D {
    Grid2D::centered(cfg.grid.half_width, cfg.grid.n)
}

/// Closed form for quadratic potentials, the solver otherwise.
pub fn equilibrium(spec: &PotentialSpec, g: Grid2D) -> Result<EquilibriumData> {
    match spec {
        PotentialSpec::Quadratic { a } => Ok(quadratic_closed_form(*a, g)?),
        _ => Ok(solve_equilibrium(spec.build()?, g, &SolveOptions::default()).context("solving the equilibrium")?),
    }
}

fn is_circular_law(spec: &PotentialSpec) -> bool {
    matches!(spec, PotentialSpec::Quadratic { a } if *a == 1.0)
}

/// Derived seed for sub-run `k`: the first draw of a dedicated stream.
fn sub_seed(seed: u64, k: u64) -> u64 {
    rng::tagged(seed, rng::purpose::CONFIG, k).next_u64()
}

type Batch = Arc<Vec<Configuration>>;

/// Exact Ginibre samples, cached per process so that experiments sharing a
/// seed share the batch.
pub fn ginibre_cached(n: usize, count: usize, seed: u64) -> Result<Batch> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, u64), Batch>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(b) = cache.lock().unwrap().get(&(n, count, seed)) {
        return Ok(b.clone());
    }
    let b = Arc::new(ginibre_batch(n, count, seed)?);
    cache.lock().unwrap().insert((n, count, seed), b.clone());
    Ok(b)
}

/// Values of several linear statistics over a sample, with the integrated
/// autocorrelation time of each (1 for independent samples).
pub struct StatSample {
    pub values: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub acceptance: Option<f64>,
}

impl StatSample {
    pub fn mean_se(&self, k: usize) -> (f64, f64) {
        let v = &self.values[k];
        (stats::mean(v), stats::std_error(v) * self.tau[k].max(1.0).sqrt())
    }

    pub fn var_se(&self, k: usize) -> (f64, f64) {
        let v = &self.values[k];
        (stats::variance(v), stats::variance_se(v) * self.tau[k].max(1.0).sqrt())
    }
}

/// Linear statistics of `fns` over `count` samples at `beta`.
pub fn sample_statistics(
    source: Source,
    v: &dyn Potential,
    eq: &EquilibriumData,
    fns: &[TestFunction],
    n: usize,
    beta: f64,
    count: usize,
    s: &crate::config::SamplerSection,
    seed: u64,
) -> Result<StatSample> {
    let stat: Vec<LinearStatistic> = fns.iter().map(|f| LinearStatistic::new(f, eq)).collect();
    match source {
        Source::Ginibre | Source::Both => {
            if beta != 2.0 {
                bail!("exact samples exist only at beta = 2");
            }
            let batch = ginibre_cached(n, count, seed)?;
            let rows: Vec<Vec<f64>> = batch.par_iter().map(|x| stat.iter().map(|l| l.eval(x)).collect()).collect();
            let values = (0..fns.len()).map(|k| rows.iter().map(|r| r[k]).collect()).collect();
            Ok(StatSample { values, tau: vec![1.0; fns.len()], acceptance: None })
        }
        Source::Mcmc => {
            let per = count.div_ceil(s.chains);
            let mut sc = SamplerConfig::new(n, beta, per, seed);
            sc.burn_in = s.burn_in;
            sc.thinning = s.thinning;
            let (rows, sums) = run_chains_map(&sc, v, &Init::from_equilibrium(eq), s.chains, |x| {
                stat.iter().map(|l| l.eval(x)).collect::<Vec<f64>>()
            })?;
            let values: Vec<Vec<f64>> = (0..fns.len()).map(|k| rows.iter().map(|r| r[k]).collect()).collect();
            // autocorrelation time per chain, averaged
            let tau = values
                .iter()
                .map(|v| stats::mean(&v.chunks(per).map(stats::integrated_autocorrelation).collect::<Vec<_>>()))
                .collect();
            let acceptance = stats::mean(&sums.iter().map(|s| s.acceptance_rate).collect::<Vec<_>>());
            Ok(StatSample { values, tau, acceptance: Some(acceptance) })
        }
    }
}

/// Uniform points in the droplet (rejection from the grid box).
fn droplet_points(eq: &EquilibriumData, n: usize, seed: u64, k: u64) -> Configuration {
    let mut r = rng::tagged(seed, rng::purpose::CONFIG, 1 << 20 | k);
    let g = eq.grid();
    let (lo, hi) = (g.origin, g.upper());
    let pts = (0..n)
        .map(|_| loop {
            let p = [r.random_range(lo[0]..hi[0]), r.random_range(lo[1]..hi[1])];
            if eq.in_sigma(p) {
                break p;
            }
        })
        .collect();
    Configuration::new(pts).expect("distinct random points")
}

/// Uniform points in a disk.
fn disk_points(n: usize, radius: f64, seed: u64, k: u64) -> Configuration {
    let mut r = rng::tagged(seed, rng::purpose::CONFIG, 2 << 20 | k);
    let pts = (0..n)
        .map(|_| {
            let s = radius * r.random::<f64>().sqrt();
            let t = 2.0 * PI * r.random::<f64>();
            [s * t.cos(), s * t.sin()]
        })
        .collect();
    Configuration::new(pts).expect("distinct random points")
}

/// Largest distance from `c` of a droplet cell centre.
fn droplet_radius(eq: &EquilibriumData, c: Point) -> f64 {
    let g = eq.grid();
    (0..g.len())
        .filter(|&k| eq.sigma_mask().cells[k])
        .map(|k| {
            let p = g.center_of(k);
            (p[0] - c[0]).hypot(p[1] - c[1])
        })
        .fold(0.0, f64::max)
}

fn identity_suite(cfg: &ExperimentConfig, fields: Option<&Path>) -> Result<Report> {
    let mut rep = Report::default();
    let id = &cfg.identity;
    let n = id.n;
    let (coarse, fine) = (id.refine[0], id.refine[1]);

    // splitting formula: the worst of four configurations, two grids
    let split = |gn: usize| -> Result<f64> {
        let e = equilibrium(&cfg.potential, Grid2D::centered(id.half_width, gn))?;
        let bg = Background::from_equilibrium(&e);
        let mut worst: f64 = 0.0;
        for k in 0..4 {
            worst = worst.max(splitting_residual(&droplet_points(&e, n, cfg.seed, k), &e, &bg)?);
        }
        Ok(worst)
    };
    let (sa, sb) = (split(coarse)?, split(fine)?);
    rep.metric("splitting.coarse", Metric::residual(sa));
    rep.metric("splitting.fine", Metric::residual(sb));
    rep.check(Check::at_most("splitting_residual", Some(1), sb, 1e-2 * n as f64));
    rep.check(Check::at_most("splitting_halves", Some(1), sb, sa / 2.0).with_detail(format!("coarse {sa:.3e}")));

    // truncated-energy identity at nearest-neighbour radii
    let x = well_separated();
    let eta = nn_truncation(&x)?;
    let trunc = |gn: usize| -> Result<f64> {
        let bg = Background::from_equilibrium(&equilibrium(&cfg.potential, Grid2D::centered(cfg.grid.half_width, gn))?);
        Ok(truncated_energy_identity(&x, &bg, &eta)?.relative_residual)
    };
    let (ta, tb) = (trunc(coarse)?, trunc(fine)?);
    rep.metric("truncation.coarse", Metric::residual(ta));
    rep.metric("truncation.fine", Metric::residual(tb));
    rep.check(Check::at_most("truncation_identity", Some(1), tb, 5e-2));
    rep.check(Check::at_least("truncation_refines", Some(1), ta - tb, 0.0));

    // sandwich bounds with overlapping truncations
    let eq = equilibrium(&cfg.potential, grid(cfg))?;
    let bg = Background::from_equilibrium(&eq);
    let mut held = 0usize;
    let mut sandwich = Table::new("sandwich", &["config", "gap", "lower", "upper", "holds"]);
    for k in 0..id.sandwich_configs {
        let x = disk_points(128, 0.9 * droplet_radius(&eq, [0.0, 0.0]), cfg.seed, k as u64);
        let eta = nn_truncation(&x)?.scaled(10.0);
        let r = truncated_energy_identity(&x, &bg, &eta)?;
        held += r.sandwich_holds as usize;
        sandwich.push(vec![k as f64, r.fn_value - r.rhs, r.lower_bound, r.upper_bound, r.sandwich_holds as u8 as f64]);
    }
    rep.tables.push(sandwich);
    rep.check(Check::at_least("sandwich_bounds", Some(1), held as f64, id.sandwich_configs as f64));

    // smearing constant: int f_eta = -pi eta^2 / 2
    let smear = [0.01, 0.1, 0.3]
        .iter()
        .map(|&e: &f64| (smeared_correction([0.0, 0.0], e, &|_| 1.0) + PI * e * e / 2.0).abs())
        .fold(0.0, f64::max);
    rep.metric("smearing.error", Metric::exact(smear));
    rep.check(Check::at_most("smearing_constant", Some(1), smear, 1e-9));

    // equilibrium from the solver against the closed form
    let sg = grid(cfg);
    let solved = solve_equilibrium(cfg.potential.build()?, sg, &SolveOptions::default())?;
    let h = sg.spacing;
    let el = solved.residuals;
    rep.metric("equilibrium.el_worst", Metric::residual(el.worst()));
    rep.metric("equilibrium.mass_error", Metric::residual(el.mass_error));
    rep.check(Check::at_most("el_residuals", Some(2), el.worst(), 1e-3).with_detail(format!("{el:?}")));
    if let Ok(r) = radial_support_radius(solved.potential.as_ref(), [0.0, 0.0]) {
        let err = (droplet_radius(&solved, [0.0, 0.0]) - r).abs();
        rep.metric("equilibrium.radius_error", Metric::residual(err));
        rep.check(Check::at_most("support_radius", Some(2), err, h).with_detail(format!("radius {r}, spacing {h}")));
    }
    if let PotentialSpec::Quadratic { a } = cfg.potential {
        let exact = quadratic_closed_form(a, sg)?;
        let dens = [[0.0, 0.0], [0.3, 0.2], [-0.2, -0.4]]
            .iter()
            .map(|&p: &Point| {
                let p = [p[0] / a.sqrt(), p[1] / a.sqrt()];
                (solved.density_at(p) / exact.density_at(p) - 1.0).abs()
            })
            .fold(0.0, f64::max);
        rep.metric("equilibrium.density_error", Metric::residual(dens));
        rep.metric("equilibrium.c0_error", Metric::residual((solved.c0 - exact.c0).abs()));
        rep.check(Check::at_most("density", Some(2), dens, 1e-3));
        rep.check(Check::at_most("c0", Some(2), (solved.c0 - exact.c0).abs(), 1e-3).with_detail(format!("c0 {}", solved.c0)));
    }
    if let Some(dir) = fields {
        solved.write_dir(&dir.join("equilibrium"))?;
    }

    // variance formula against the Fourier form on the unit disk
    if is_circular_law(&cfg.potential) {
        let mut t = Table::new("rider_virag", &["index", "variance", "fourier", "relative"]);
        let mut worst: f64 = 0.0;
        for (k, xi) in boundary_library().iter().enumerate() {
            let v = predicted_variance(xi, &eq, 2.0, Case::Boundary)?;
            let f = rider_virag_variance(xi);
            let rel = (v / f - 1.0).abs();
            worst = worst.max(rel);
            rep.metric(format!("rider_virag.{}", xi.name), Metric::exact(v));
            t.push(vec![k as f64, v, f, rel]);
        }
        rep.tables.push(t);
        rep.check(Check::at_most("rider_virag", Some(6), worst, 1e-2));
    }
    Ok(rep)
}

fn well_separated() -> Configuration {
    Configuration::new(vec![[0.4, 0.1], [-0.35, 0.3], [0.05, -0.5], [-0.2, -0.1]]).expect("distinct points")
}

fn beta_key(b: f64) -> String {
    format!("b{b}")
}

fn clt_verify(cfg: &ExperimentConfig, fields: Option<&Path>) -> Result<Report> {
    let mut rep = Report::default();
    let eq = equilibrium(&cfg.potential, grid(cfg))?;
    if let Some(dir) = fields {
        eq.write_dir(&dir.join("equilibrium"))?;
    }
    let v = cfg.potential.build()?;
    let fns = cfg.test_function_list()?;
    let s = &cfg.sampler;
    let sources: Vec<Source> = match s.source {
        Source::Both => vec![Source::Ginibre, Source::Mcmc],
        x => vec![x],
    };
    let clt = &cfg.clt;
    // (beta, source) -> (means, vars) per function
    let mut results: Vec<(f64, Source, Vec<(f64, f64)>, Vec<(f64, f64)>)> = Vec::new();
    for (bi, &beta) in s.beta_list().iter().enumerate() {
        for &src in &sources {
            let seed = match src {
                Source::Ginibre => cfg.seed,
                _ => sub_seed(cfg.seed, bi as u64),
            };
            let sample = sample_statistics(src, v.as_ref(), &eq, &fns, s.n, beta, s.samples, s, seed)?;
            let tag = format!("{}.{}", beta_key(beta), if src == Source::Ginibre { "ginibre" } else { "mcmc" });
            if let Some(a) = sample.acceptance {
                rep.metric(format!("{tag}.acceptance"), Metric::exact(a));
            }
            let mut ms = Vec::new();
            let mut vs = Vec::new();
            let mut values = Table::new(&format!("fluct_{}", tag.replace('.', "_")), &[]);
            values.header = fns.iter().map(|f| f.name.clone()).collect();
            for i in 0..sample.values[0].len() {
                values.push(sample.values.iter().map(|v| v[i]).collect());
            }
            rep.tables.push(values);
            for (k, xi) in fns.iter().enumerate() {
                let case = classify(xi, &eq);
                let pm = predicted_mean(xi, &eq, beta, case)?;
                let pv = predicted_variance(xi, &eq, beta, case)?;
                let (m, mse) = sample.mean_se(k);
                let (var, vse) = sample.var_se(k);
                let key = format!("{tag}.{}", xi.name);
                rep.metric(format!("{key}.mean"), Metric::stat(m, mse));
                rep.metric(format!("{key}.variance"), Metric::stat(var, vse));
                rep.metric(format!("{key}.tau"), Metric::exact(sample.tau[k]));
                rep.metric(format!("{key}.predicted_mean"), Metric::exact(pm));
                rep.metric(format!("{key}.predicted_variance"), Metric::exact(pv));
                if clt.mean_betas.is_empty() || clt.mean_betas.contains(&beta) {
                    rep.check(
                        Check::at_most(&format!("{key}.mean"), None, (m - pm).abs(), 3.0 * mse)
                            .with_detail(format!("mean {m:.4e} predicted {pm:.4e}")),
                    );
                }
                if let Some(tol) = clt.variance_tol {
                    rep.check(
                        Check::at_most(&format!("{key}.variance"), None, (var / pv - 1.0).abs(), tol)
                            .with_detail(format!("variance {var:.4e} predicted {pv:.4e}")),
                    );
                }
                if let Some(alpha) = clt.ks_alpha {
                    let batch = FluctuationBatch::new(sample.values[k].clone(), Default::default())?;
                    let pred = CltPrediction { mean: pm, variance: pv, case };
                    let g = gaussianity_test(&batch, &pred)?;
                    rep.metric(format!("{key}.ks_p"), Metric::exact(g.p_value));
                    rep.check(Check::at_least(&format!("{key}.ks"), None, g.p_value, alpha));
                    let mut t = Table::new(&format!("ecdf_{}", key.replace('.', "_")), &["x", "empirical", "gaussian"]);
                    for (x, e, gg) in ecdf_table(&batch, &pred) {
                        t.push(vec![x, e, gg]);
                    }
                    rep.tables.push(t);
                }
                ms.push((m, mse));
                vs.push((var, vse));
            }
            results.push((beta, src, ms, vs));
        }
    }
    // exact against MCMC at equal beta
    if sources.len() == 2 {
        for pair in results.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            for (k, xi) in fns.iter().enumerate() {
                let key = format!("{}.{}", beta_key(a.0), xi.name);
                let (ma, sa) = a.2[k];
                let (mb, sb) = b.2[k];
                rep.check(Check::at_most(&format!("{key}.cross_mean"), None, (ma - mb).abs(), 3.0 * sa.hypot(sb)));
                let (va, vsa) = a.3[k];
                let (vb, vsb) = b.3[k];
                rep.check(Check::at_most(&format!("{key}.cross_variance"), None, (va - vb).abs(), 3.0 * vsa.hypot(vsb)));
            }
        }
    }
    // beta Var is constant across the sweep
    let betas = s.beta_list();
    if betas.len() > 1 {
        let mcmc: Vec<&(f64, Source, Vec<(f64, f64)>, Vec<(f64, f64)>)> =
            results.iter().filter(|r| r.1 == *sources.last().unwrap()).collect();
        let mut t = Table::new("beta_sweep", &["beta", "function", "variance", "variance_se", "beta_variance"]);
        for (k, xi) in fns.iter().enumerate() {
            if classify(xi, &eq) != Case::Interior {
                continue;
            }
            for r in &mcmc {
                t.push(vec![r.0, k as f64, r.3[k].0, r.3[k].1, r.0 * r.3[k].0]);
            }
            for i in 0..mcmc.len() {
                for j in i + 1..mcmc.len() {
                    let (bi, bj) = (mcmc[i].0, mcmc[j].0);
                    let ratio = bi * mcmc[i].3[k].0 / (bj * mcmc[j].3[k].0);
                    rep.metric(format!("ratio.{}.{}.{}", xi.name, beta_key(bi), beta_key(bj)), Metric::exact(ratio));
                    rep.check(Check::at_most(
                        &format!("{}.ratio_{}_{}", xi.name, beta_key(bi), beta_key(bj)),
                        None,
                        (ratio - 1.0).abs(),
                        clt.ratio_tol,
                    ));
                }
            }
        }
        rep.tables.push(t);
    }
    Ok(rep)
}

fn meso_verify(cfg: &ExperimentConfig) -> Result<Report> {
    let mut rep = Report::default();
    let eq = equilibrium(&cfg.potential, grid(cfg))?;
    let v = cfg.potential.build()?;
    let template = cfg.test_function_list()?.remove(0);
    let s = &cfg.sampler;
    let mut t = Table::new("meso", &["n", "scale", "mean", "mean_se", "variance", "variance_se", "predicted", "margin_ok"]);
    for (k, &n) in cfg.meso.ns.iter().enumerate() {
        let l = (n as f64).powf(-cfg.meso.exponent);
        let xi = template.with_scale(template.scale * l);
        let seed = if s.source == Source::Mcmc { sub_seed(cfg.seed, k as u64) } else { cfg.seed };
        let sample = sample_statistics(s.source, v.as_ref(), &eq, std::slice::from_ref(&xi), n, s.beta, s.samples, s, seed)?;
        let pv = predicted_variance(&xi, &eq, s.beta, Case::Mesoscopic)?;
        let (m, mse) = sample.mean_se(0);
        let (var, vse) = sample.var_se(0);
        // the 4 l_N margin to the boundary is reported, not enforced
        let margin = mesoscopic_margin_ok(&xi, &eq);
        let key = format!("n{n}");
        rep.metric(format!("{key}.mean"), Metric::stat(m, mse));
        rep.metric(format!("{key}.variance"), Metric::stat(var, vse));
        rep.metric(format!("{key}.predicted_variance"), Metric::exact(pv));
        rep.metric(format!("{key}.margin_ok"), Metric::exact(margin as u8 as f64));
        rep.check(Check::at_most(&format!("{key}.mean"), Some(7), m.abs(), 3.0 * mse));
        rep.check(
            Check::at_most(&format!("{key}.variance"), Some(7), (var / pv - 1.0).abs(), cfg.meso.variance_tol)
                .with_detail(format!("variance {var:.4e} predicted {pv:.4e}")),
        );
        t.push(vec![n as f64, l, m, mse, var, vse, pv, margin as u8 as f64]);
    }
    rep.tables.push(t);
    Ok(rep)
}

/// `sup |xi|` sampled on a 201 x 201 grid over the support.
fn sup_norm(xi: &TestFunction) -> f64 {
    let r = xi.support_radius();
    let m = 200;
    let mut best: f64 = 0.0;
    for i in 0..=m {
        for j in 0..=m {
            let p = [xi.center[0] - r + 2.0 * r * i as f64 / m as f64, xi.center[1] - r + 2.0 * r * j as f64 / m as f64];
            best = best.max(xi.value(p).abs());
        }
    }
    best
}

fn minimize(cfg: &ExperimentConfig, fields: Option<&Path>) -> Result<Report> {
    let mut rep = Report::default();
    let v = cfg.potential.build()?;
    let eq = equilibrium(&cfg.potential, grid(cfg))?;
    let mc = &cfg.minimize;
    if let PotentialSpec::Quadratic { a } = cfg.potential {
        // two points: -2 log(2r) + 4 a r^2 is minimal at separation 1/sqrt(a)
        let mcfg = MinimizerConfig { grad_tol: 1e-10, seed: cfg.seed, ..Default::default() };
        let two = minimize_energy(2, v.as_ref(), &Init::Disk { center: [0.0, 0.0], radius: 1.0 }, &mcfg)?;
        let p = &two.config.points;
        let sep = (p[0][0] - p[1][0]).hypot(p[0][1] - p[1][1]);
        rep.metric("two_point.separation", Metric::exact(sep));
        rep.check(Check::at_most("two_point_separation", Some(9), (sep - 1.0 / a.sqrt()).abs(), 1e-6));
    }
    let mcfg = MinimizerConfig {
        max_iters: mc.max_iters,
        grad_tol: mc.grad_tol,
        restarts: mc.restarts,
        seed: cfg.seed,
        ..Default::default()
    };
    let res = minimize_energy(mc.n, v.as_ref(), &Init::from_equilibrium(&eq), &mcfg)?;
    let stray = confinement_violations(&res.config.points, &eq);
    rep.metric("minimizer.energy", Metric::exact(res.energy));
    rep.metric("minimizer.grad_norm", Metric::exact(res.grad_norm));
    rep.check(Check::at_most("minimizer_converged", Some(9), res.grad_norm, mc.grad_tol));
    rep.check(Check::at_most("confinement", Some(9), stray.len() as f64, 0.0));
    let mut t = Table::new("minimizer_fluct", &["index", "fluct", "limit", "sup_norm"]);
    for (k, xi) in cfg.test_function_list()?.iter().enumerate() {
        let case = classify(xi, &eq);
        let f = LinearStatistic::new(xi, &eq).eval(&res.config);
        // the beta -> infinity value of the mean formula
        let limit = if case == Case::Mesoscopic { 0.0 } else { predicted_mean(xi, &eq, f64::INFINITY, case)? };
        let scale = sup_norm(xi);
        rep.metric(format!("fluct.{}", xi.name), Metric::exact(f));
        rep.metric(format!("limit.{}", xi.name), Metric::exact(limit));
        rep.check(
            Check::at_most(&format!("{}.fluct", xi.name), Some(9), (f - limit).abs(), mc.fluct_tol * scale)
                .with_detail(format!("fluct {f:.4e} limit {limit:.4e}")),
        );
        t.push(vec![k as f64, f, limit, scale]);
    }
    rep.tables.push(t);
    let mut pts = Table::new("minimizer_points", &["x", "y"]);
    for p in &res.config.points {
        pts.push(vec![p[0], p[1]]);
    }
    rep.tables.push(pts);
    let mut r = Table::new("restart_energies", &["restart", "energy"]);
    for (k, e) in res.restart_energies.iter().enumerate() {
        r.push(vec![k as f64, *e]);
    }
    rep.tables.push(r);
    if let Some(dir) = fields {
        eq.write_dir(&dir.join("equilibrium"))?;
    }
    Ok(rep)
}

/// Least-squares slope of `log err` against `log t`.
pub fn fitted_order(ts: &[f64], err: &[f64]) -> f64 {
    let x: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let y: Vec<f64> = err.iter().map(|e| e.ln()).collect();
    let (mx, my) = (stats::mean(&x), stats::mean(&y));
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn transport_check(cfg: &ExperimentConfig, fields: Option<&Path>) -> Result<Report> {
    if !is_circular_law(&cfg.potential) {
        bail!("transport-check compares against the exact disk background and needs the quadratic potential with a = 1");
    }
    let mut rep = Report::default();
    let tc = &cfg.transport;
    let beta = cfg.sampler.beta;
    let g = grid(cfg);
    let eq = equilibrium(&cfg.potential, g)?;
    let xi = cfg.test_function_list()?.remove(0);
    let interior = classify(&xi, &eq) == Case::Interior;
    let map = if interior { build_psi_interior(&xi, &eq)? } else { build_psi_boundary(&xi, &eq)? };
    rep.metric("map.weak_residual", Metric::residual(map.residual));
    rep.metric("map.ttilde_max", Metric::exact(map.t_tilde_max(beta)));

    // anisotropy matrix is trace-free; A_s is linear in psi
    let mut r = rng::tagged(cfg.seed, rng::purpose::SYNTHETIC, 0);
    let trace = (0..1000)
        .map(|_| {
            let m = [[r.random_range(-1e3..1e3), r.random_range(-1e3..1e3)], [r.random_range(-1e3..1e3), r.random_range(-1e3..1e3)]];
            let a = anisotropy_matrix(&m);
            (a[0][0] + a[1][1]).abs() / 1e3
        })
        .fold(0.0, f64::max);
    rep.check(Check::at_most("anisotropy_trace_free", Some(10), trace, 1e-12));
    let lg = Grid2D::centered(2.0, 128);
    let bg = Background::from_equilibrium(&equilibrium(&cfg.potential, lg)?);
    let x16 = ginibre_cached(16, 1, sub_seed(cfg.seed, 16))?[0].clone();
    let p1 = VectorField2D::from_fn(lg, |p| [0.3 * p[0] + p[1], -0.2 * p[0] + 0.7 * p[1]]);
    let p2 = VectorField2D::from_fn(lg, |p| map.psi_at(p));
    let (a, b) = (1.7, -0.6);
    let comb = VectorField2D {
        grid: lg,
        values: p1.values.iter().zip(&p2.values).map(|(u, v)| [a * u[0] + b * v[0], a * u[1] + b * v[1]]).collect(),
    };
    let lhs = anisotropy(&comb, &x16, &bg, 0.25)?.value;
    let rhs = a * anisotropy(&p1, &x16, &bg, 0.25)?.value + b * anisotropy(&p2, &x16, &bg, 0.25)?.value;
    let lin = (lhs - rhs).abs() / (1.0 + lhs.abs());
    rep.metric("anisotropy.linearity", Metric::exact(lin));
    rep.check(Check::at_most("anisotropy_linear", Some(10), lin, 1e-10));

    // push-forward mass and the approximate perturbed family
    let tm = map.t_tilde_max(beta);
    let fam = approx_family(&eq, &map, 0.5 * tm, beta)?;
    rep.metric("pushforward.mass_error", Metric::residual(fam.mass_error));
    rep.check(Check::at_most("pushforward_mass", Some(10), fam.mass_error, 1e-6));
    if let Some(dir) = fields {
        map.write_dir(&dir.join("transport"))?;
        fam.write_dir(&dir.join("approx_family"))?;
    }
    if interior {
        let mut t = Table::new("pushforward_order", &["t", "distance"]);
        let mut errs = Vec::new();
        for &tt in &tc.pushforward_ts {
            let tilde = pushforward_density(&eq, &map, tt, beta)?;
            let pe = perturbed_equilibrium(&eq, &xi, tt, beta, &SolveOptions::default())?;
            let d = interior_density_distance(&tilde, &pe.mu_t)?;
            t.push(vec![tt, d]);
            errs.push(d);
        }
        let order = fitted_order(&tc.pushforward_ts, &errs);
        rep.metric("pushforward.order", Metric::exact(order));
        rep.check(Check::at_least("pushforward_order", Some(10), order, 1.8));
        rep.tables.push(t);
    }

    // energy change along the transport against its first-order prediction
    let x = ginibre_cached(tc.n, 1, sub_seed(cfg.seed, tc.n as u64))?[0].clone();
    let disk = UniformDisk::circular_law().with_break(xi.center, xi.support_radius());
    let opts = TransportCheckOptions {
        beta,
        ts: tc.ts.clone(),
        s: tc.s,
        sweep: tc.sweep.clone(),
        cells_per_eta: 0.0,
        ..Default::default()
    };
    let er = energy_transport_check(&x, &disk, &map, &opts)?;
    rep.metric("energy.order_fixed_s", Metric::exact(er.order));
    rep.metric("energy.order", Metric::exact(er.order_limit));
    rep.metric("energy.order_linear", Metric::exact(er.order_linear));
    rep.metric("energy.first_variation", Metric::exact(er.first_variation));
    rep.metric("energy.anisotropy", Metric::exact(er.anisotropy));
    rep.metric("energy.anisotropy_limit", Metric::exact(er.anisotropy_limit));
    // the s^2 t error term is removed by extrapolating A_s to s = 0
    rep.check(Check::at_least("energy_residual_order", Some(10), er.order_limit, 1.8));
    let mut t = Table::new("energy_transport", &["t", "lhs", "rhs", "residual", "residual_limit", "residual_linear"]);
    for p in &er.points {
        t.push(vec![p.t, p.lhs, p.rhs, p.residual, p.residual_limit, p.residual_linear]);
    }
    rep.tables.push(t);
    let mut t = Table::new("anisotropy_sweep", &["s", "anisotropy", "comparison", "gap"]);
    for p in &er.sweep {
        t.push(vec![p.s, p.anisotropy, p.comparison, p.gap]);
    }
    rep.tables.push(t);

    // transported field is divergence compatible with the pushed measure
    let eta = nn_truncation(&x)?.scaled(0.25);
    let reference = Reference::Disk(UniformDisk::circular_law());
    let probes = vec![
        TestFunction::bump([0.0, 0.0], 0.9, 1.0),
        TestFunction::bump([0.3, 0.1], 0.5, 1.0),
        TestFunction::bump([-0.2, -0.3], 0.6, 1.0),
    ];
    let dg = Grid2D::centered(1.0, tc.divergence_grid);
    let t0 = tc.pushforward_ts[0];
    let checks = transported_divergence_check(&x, &eta, &reference, &map, t0, beta, dg, &probes)?;
    let worst = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    rep.metric("divergence.worst_relative", Metric::residual(worst));
    rep.check(Check::at_most("transported_divergence", Some(10), worst, 2e-2));
    Ok(rep)
}

fn moddev(cfg: &ExperimentConfig) -> Result<Report> {
    let mut rep = Report::default();
    let eq = equilibrium(&cfg.potential, grid(cfg))?;
    let v = cfg.potential.build()?;
    let xi = cfg.test_function_list()?.remove(0);
    let s = &cfg.sampler;
    let source = if s.source == Source::Both { Source::Ginibre } else { s.source };
    let sample = sample_statistics(source, v.as_ref(), &eq, std::slice::from_ref(&xi), s.n, s.beta, s.samples, s, cfg.seed)?;
    let batch = FluctuationBatch::new(sample.values[0].clone(), Default::default())?;
    let md = moderate_deviation_check(&batch, &cfg.moddev.taus)?;
    rep.metric("c_fit", Metric::exact(md.c_fit));
    rep.metric("c_min", Metric::exact(md.c_min));
    rep.metric("min_effective_size", Metric::exact(md.min_effective_size));
    let (m, mse) = sample.mean_se(0);
    let (var, vse) = sample.var_se(0);
    rep.metric("mean", Metric::stat(m, mse));
    rep.metric("variance", Metric::stat(var, vse));
    rep.check(Check::holds("laplace_convex", Some(11), md.convex).with_detail(format!("min second difference {:.3e}", md.min_second_difference)));
    rep.check(Check::holds("single_c_bound", Some(11), md.bound_holds).with_detail(format!("c_fit {:.4}", md.c_fit)));
    rep.check(Check::holds("tails_consistent", Some(11), md.tails_consistent && !md.tails.is_empty()));
    let mut t = Table::new("laplace", &["tau", "log_laplace", "se", "effective_size", "bound"]);
    for l in &md.laplace {
        t.push(vec![l.tau, l.value, l.se, l.effective_size, md.c_fit * (l.tau * l.tau + l.tau.abs())]);
    }
    rep.tables.push(t);
    let mut t = Table::new("tails", &["level", "frequency", "frequency_se", "bound"]);
    for r in &md.tails {
        t.push(vec![r.level, r.frequency, r.frequency_se, r.bound]);
    }
    rep.tables.push(t);
    Ok(rep)
}

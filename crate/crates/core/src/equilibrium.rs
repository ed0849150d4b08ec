//! Equilibrium measure `mu_0`, confinement `zeta_0 = h^{mu_0} + V/2 - c_0`,
//! and the perturbed family `mu_t`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::field::logpot::{self_energy, LogConvolver};
use crate::field::{Grid2D, LevelSet, Mask, Measure2D, Region, ScalarField2D};
use crate::potential::{growth_check, Potential, Tilted};
use crate::test_function::TestFunction;
use crate::{Error, Point, Result};

/// Euler-Lagrange residuals on the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElResiduals {
    /// `max(-zeta_0)` over all cells (0 if `zeta_0 >= 0`).
    pub max_negative: f64,
    /// `max |zeta_0|` over cells with centre in `Sigma`.
    pub max_on_sigma: f64,
    /// `max - min` of `h + V/2` over `Sigma`.
    pub constancy_defect: f64,
    pub mass_error: f64,
}

impl ElResiduals {
    pub fn worst(&self) -> f64 {
        self.max_negative.max(self.max_on_sigma).max(self.constancy_defect)
    }
}

#[derive(Clone, Debug)]
pub struct EquilibriumData {
    pub potential: Arc<dyn Potential>,
    pub mu0: Measure2D,
    /// Droplet `Sigma` with its sub-cell boundary.
    pub sigma: Region,
    /// Coincidence set `{zeta_0 <= spacing^2}`.
    pub omega: Mask,
    pub h_mu: ScalarField2D,
    pub zeta0: ScalarField2D,
    pub c0: f64,
    pub iv: f64,
    pub residuals: ElResiduals,
    /// Solver iterations (0 for closed-form data).
    pub iterations: usize,
    /// Final Frank-Wolfe duality gap (0 for closed-form data).
    pub gap: f64,
}

impl EquilibriumData {
    pub fn grid(&self) -> Grid2D {
        self.mu0.grid()
    }

    pub fn sigma_mask(&self) -> &Mask {
        &self.sigma.mask
    }

    /// Whether `p` lies in `Sigma` (sub-cell boundary).
    pub fn in_sigma(&self, p: Point) -> bool {
        match &self.sigma.level {
            Some(l) => self.grid().contains(p) && l.value(p) <= 0.0,
            None => self.grid().cell_of(p).is_some_and(|(i, j)| self.sigma.mask.get(i, j)),
        }
    }

    /// Pointwise equilibrium density (zero outside `Sigma`).
    pub fn density_at(&self, p: Point) -> f64 {
        if self.in_sigma(p) {
            self.potential.laplacian(p) / (4.0 * PI)
        } else {
            0.0
        }
    }

    /// `zeta_0` at an arbitrary point by bilinear interpolation.
    pub fn zeta_at(&self, p: Point) -> f64 {
        self.zeta0.sample(p)
    }

    /// Cells of `Sigma` and `omega` that disagree.
    pub fn mask_symmetric_difference(&self) -> usize {
        self.sigma.mask.cells.iter().zip(&self.omega.cells).filter(|(a, b)| a != b).count()
    }

    /// Writes fields (binary) and a JSON manifest to `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        use crate::field::io::write_binary;
        std::fs::create_dir_all(dir)?;
        let file = |name: &str| std::fs::File::create(dir.join(name)).map(std::io::BufWriter::new);
        write_binary(&self.mu0.density, file("mu0.bin")?)?;
        write_binary(&self.zeta0, file("zeta0.bin")?)?;
        write_binary(&self.h_mu, file("h_mu.bin")?)?;
        let sigma = ScalarField2D {
            grid: self.grid(),
            values: self.sigma.mask.cells.iter().map(|&c| c as u8 as f64).collect(),
        };
        write_binary(&sigma, file("sigma_mask.bin")?)?;
        let manifest = serde_json::json!({
            "potential": self.potential.describe(),
            "grid": self.grid(),
            "c0": self.c0,
            "iv": self.iv,
            "mass": self.mu0.mass(),
            "residuals": self.residuals,
            "sigma_cells": self.sigma.mask.count(),
            "omega_cells": self.omega.count(),
            "mask_symmetric_difference": self.mask_symmetric_difference(),
            "iterations": self.iterations,
            "duality_gap": self.gap,
            "byte_order": "little-endian",
        });
        std::fs::write(dir.join("equilibrium.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// `int int -log|x-y| dmu dmu + int V dmu`.
pub fn logarithmic_energy(mu: &Measure2D, v: &dyn Potential) -> f64 {
    let h = LogConvolver::new(mu.grid()).apply(&mu.density).expect("same grid");
    self_energy(mu, &h) + mu.integrate(|p| v.value(p))
}

/// Support radius `R` of the equilibrium measure of a radial potential about
/// `center`: solves `(1/2) int_0^R Delta V(r) r dr = 1` by bisection.
pub fn radial_support_radius(v: &dyn Potential, center: Point) -> Result<f64> {
    let mass = |r: f64| {
        // composite Simpson on [0, r]
        let n = 2000;
        let h = r / n as f64;
        let f = |s: f64| 0.5 * v.laplacian([center[0] + s, center[1]]) * s;
        let mut acc = f(0.0) + f(r);
        for k in 1..n {
            acc += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    let mut hi = 1.0;
    while mass(hi) < 1.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Assumption("radial mass never reaches 1".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn potential_field(mu: &Measure2D) -> ScalarField2D {
    LogConvolver::new(mu.grid()).apply(&mu.density).expect("same grid")
}

/// Assembles `zeta_0`, `c_0`, `I_V`, `omega` and residuals from `mu_0`.
fn finish(v: Arc<dyn Potential>, mu0: Measure2D, sigma: Region, iterations: usize, gap: f64) -> Result<EquilibriumData> {
    let g = mu0.grid();
    let h_mu = potential_field(&mu0);
    let u = ScalarField2D::from_fn(g, |p| v.value(p) / 2.0).zip_with(&h_mu, |a, b| a + b)?;
    let c0 = u.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let zeta0 = u.map(|x| x - c0);
    let band = g.spacing * g.spacing;
    let omega = Mask { grid: g, cells: zeta0.values.iter().map(|&z| z <= band).collect() };
    let iv = self_energy(&mu0, &h_mu) + mu0.integrate(|p| v.value(p));
    let mut eq = EquilibriumData {
        potential: v,
        mu0,
        sigma,
        omega,
        h_mu,
        zeta0,
        c0,
        iv,
        residuals: ElResiduals::default(),
        iterations,
        gap,
    };
    eq.residuals = verify_euler_lagrange(&eq);
    Ok(eq)
}

/// Equilibrium data for `V = a|x|^2` from closed forms: `Sigma` the disk of
/// radius `1/sqrt(a)`, density `a/pi`, `c_0 = 1/2 + log(a)/2`.
pub fn quadratic_closed_form(a: f64, grid: Grid2D) -> Result<EquilibriumData> {
    if a <= 0.0 {
        return Err(Error::InvalidInput("quadratic coefficient must be positive".into()));
    }
    let v: Arc<dyn Potential> = Arc::new(crate::potential::Quadratic { a });
    let r0 = 1.0 / a.sqrt();
    let level = LevelSet::from_fn(grid, |p| crate::norm(p) - r0);
    let mu0 = Measure2D::from_level_set(level.clone(), |_| a / PI);
    let h = |p: Point| {
        let r = crate::norm(p);
        if r <= r0 {
            -r0.ln() + 0.5 * (1.0 - r * r / (r0 * r0))
        } else {
            -r.ln()
        }
    };
    let c0 = 0.5 - r0.ln();
    let h_mu = ScalarField2D::from_fn(grid, h);
    let zeta0 = ScalarField2D::from_fn(grid, |p| (h(p) + a * (p[0] * p[0] + p[1] * p[1]) / 2.0 - c0).max(0.0));
    let band = grid.spacing * grid.spacing;
    let omega = Mask { grid, cells: zeta0.values.iter().map(|&z| z <= band).collect() };
    let mut eq = EquilibriumData {
        potential: v,
        mu0,
        sigma: Region::from_level(level),
        omega,
        h_mu,
        zeta0,
        c0,
        iv: 0.75 - r0.ln(),
        residuals: ElResiduals::default(),
        iterations: 0,
        gap: 0.0,
    };
    eq.residuals = verify_euler_lagrange(&eq);
    Ok(eq)
}

/// The circular law: equilibrium of `V = |x|^2`.
pub fn circular_law(grid: Grid2D) -> EquilibriumData {
    quadratic_closed_form(1.0, grid).expect("positive coefficient")
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Stop when the Frank-Wolfe duality gap falls below this times
    /// `spacing^3` (the energy of misplacing a one-cell boundary layer).
    pub gap_tol: f64,
    /// Smoothing passes applied to the mask's level function.
    pub smoothing: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { max_iterations: 150, gap_tol: 0.1, smoothing: 3 }
    }
}

/// Occupancy of the cells of lowest `u` filled to unit mass with density
/// `rho`; the last cell is partially filled.
fn fill_lowest(u: &[f64], rho: &[f64], area: f64, g: Grid2D) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    let mut occ = vec![0.0; g.len()];
    let mut m = 0.0;
    for k in order {
        if rho[k] <= 0.0 {
            let (i, j) = g.coords(k);
            return Err(Error::Assumption(format!(
                "Delta V <= 0 at {:?} inside the candidate support",
                g.center(i, j)
            )));
        }
        let dm = rho[k] * area;
        if m + dm >= 1.0 {
            occ[k] = (1.0 - m) / dm;
            return Ok(occ);
        }
        occ[k] = 1.0;
        m += dm;
    }
    Err(Error::InvalidInput("grid cannot hold unit mass".into()))
}

/// Level function `(1/2 - occupancy)` averaged over the cells around each node,
/// in units of the spacing.
fn occupancy_level(theta: &[f64], g: Grid2D) -> LevelSet {
    let mut nodes = Vec::with_capacity((g.nx + 1) * (g.ny + 1));
    for j in 0..=g.ny {
        for i in 0..=g.nx {
            let mut s = 0.0;
            for (a, b) in [(0isize, 0isize), (-1, 0), (0, -1), (-1, -1)] {
                let (ci, cj) = (i as isize + a, j as isize + b);
                if ci >= 0 && cj >= 0 && (ci as usize) < g.nx && (cj as usize) < g.ny {
                    s += 0.25 * theta[g.index(ci as usize, cj as usize)];
                }
            }
            nodes.push((0.5 - s) * 2.0 * g.spacing);
        }
    }
    LevelSet { grid: g, nodes }
}

fn smooth_nodes(level: &mut LevelSet, passes: usize) {
    let (w, hgt) = (level.grid.nx + 1, level.grid.ny + 1);
    for _ in 0..passes {
        let src = level.nodes.clone();
        for j in 0..hgt {
            for i in 0..w {
                let mut s = 0.0;
                let mut wt = 0.0;
                for (dj, a) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                    for (di, b) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                        let (ii, jj) = (i as isize + di, j as isize + dj);
                        if ii >= 0 && jj >= 0 && (ii as usize) < w && (jj as usize) < hgt {
                            s += a * b * src[jj as usize * w + ii as usize];
                            wt += a * b;
                        }
                    }
                }
                level.nodes[j * w + i] = s / wt;
            }
        }
    }
}

/// Solves for `mu_0` as the minimizer of the logarithmic energy among
/// densities `0 <= mu <= Delta V/(4 pi)` of unit mass, which under (H2) is the
/// equilibrium measure. Frank-Wolfe steps move mass towards the cells where
/// `h + V/2` is lowest, with exact line search on the quadratic energy; the
/// converged occupancy is turned into a smoothed level function whose zero
/// set, shifted to give exact unit mass, is the sub-cell boundary of `Sigma`.
pub fn solve_equilibrium(v: Arc<dyn Potential>, grid: Grid2D, opts: &SolveOptions) -> Result<EquilibriumData> {
    let g = grid;
    let c = g.box_center();
    let r_test = (c[0] - g.origin[0]).min(c[1] - g.origin[1]).min(g.upper()[0] - c[0]).min(g.upper()[1] - c[1])
        - c[0].hypot(c[1]);
    if !growth_check(v.as_ref(), r_test) {
        return Err(Error::Assumption(format!("growth condition fails on the circle of radius {r_test:.3}")));
    }
    let area = g.cell_area();
    let rho: Vec<f64> = (0..g.len()).map(|k| v.laplacian(g.center_of(k)) / (4.0 * PI)).collect();
    let vhalf: Vec<f64> = (0..g.len()).map(|k| v.value(g.center_of(k)) / 2.0).collect();
    let conv = LogConvolver::new(g);

    // Frank-Wolfe with exact line search on the convex energy over
    // `0 <= mu <= Delta V / (4 pi)` with unit mass; the linear minimization
    // step fills the cells of lowest `h + V/2`.
    let mut theta = fill_lowest(&vhalf, &rho, area, g)?;
    let dens = |th: &[f64]| ScalarField2D { grid: g, values: th.iter().zip(&rho).map(|(t, r)| t * r).collect() };
    let mut u: Vec<f64> = conv.apply(&dens(&theta))?.values.iter().zip(&vhalf).map(|(a, b)| a + b).collect();
    let mut iterations = 0;
    let mut gap = f64::INFINITY;
    let gap_tol = opts.gap_tol * g.spacing.powi(3);
    while iterations < opts.max_iterations {
        let s = fill_lowest(&u, &rho, area, g)?;
        let d: Vec<f64> = s.iter().zip(&theta).map(|(a, b)| a - b).collect();
        gap = -(0..g.len()).map(|k| u[k] * rho[k] * d[k]).sum::<f64>() * area;
        if gap <= gap_tol {
            break;
        }
        iterations += 1;
        let kd = conv.apply(&dens(&d))?;
        let curv = (0..g.len()).map(|k| rho[k] * d[k] * kd.values[k]).sum::<f64>() * area;
        let gamma = if curv > 0.0 { (gap / curv).clamp(0.0, 1.0) } else { 1.0 };
        for k in 0..g.len() {
            theta[k] += gamma * d[k];
            u[k] += gamma * kd.values[k];
        }
    }
    // Frank-Wolfe converges sublinearly; a gap within a small multiple of the
    // tolerance already pins the boundary to a fraction of a cell.
    if gap > 50.0 * gap_tol {
        return Err(Error::NoConvergence(format!("equilibrium duality gap {gap:.3e} after {iterations} iterations")));
    }
    // sub-cell boundary with exact unit mass
    let mut level = occupancy_level(&theta, g);
    smooth_nodes(&mut level, opts.smoothing);
    let dv = |p: Point| v.laplacian(p) / (4.0 * PI);
    let mass_at = |s: f64| {
        let l = LevelSet { grid: g, nodes: level.nodes.iter().map(|x| x - s).collect() };
        (Measure2D::from_level_set(l.clone(), dv).mass(), l)
    };
    let (mut lo, mut hi) = (-2.0 * g.spacing, 2.0 * g.spacing);
    while mass_at(lo).0 > 1.0 {
        lo -= g.spacing;
    }
    while mass_at(hi).0 < 1.0 {
        hi += g.spacing;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mass_at(mid).0 < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (_, level) = mass_at(0.5 * (lo + hi));
    let mu0 = Measure2D::from_level_set(level.clone(), dv);
    let sigma = Region::from_level(level);
    for k in 0..g.len() {
        if mu0.support_mask.cells[k] && mu0.boundary.as_ref().unwrap().inner_density[k] <= 0.0 {
            return Err(Error::Assumption("Delta V <= 0 on the final support".into()));
        }
    }
    finish(v, mu0, sigma, iterations, gap)
}

/// Residuals of `zeta_0 >= 0` everywhere and `zeta_0 = 0` on `Sigma`, with the
/// potential recomputed from `mu_0` and the stored `c_0`.
pub fn verify_euler_lagrange(eq: &EquilibriumData) -> ElResiduals {
    let g = eq.grid();
    let h = potential_field(&eq.mu0);
    let mut r = ElResiduals { mass_error: (eq.mu0.mass() - 1.0).abs(), ..Default::default() };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..g.len() {
        let p = g.center_of(k);
        let u = h.values[k] + eq.potential.value(p) / 2.0;
        let z = u - eq.c0;
        r.max_negative = r.max_negative.max(-z);
        if eq.in_sigma(p) {
            r.max_on_sigma = r.max_on_sigma.max(z.abs());
            lo = lo.min(u);
            hi = hi.max(u);
        }
    }
    if hi >= lo {
        r.constancy_defect = hi - lo;
    }
    r
}

/// `int mu log mu` over the support, `0 log 0 = 0`; cut cells weight the
/// pointwise density by their coverage.
pub fn entropy(mu: &Measure2D) -> f64 {
    let g = mu.grid();
    let area = g.cell_area();
    let mut s = 0.0;
    for k in 0..g.len() {
        let d = mu.density.values[k];
        if d <= 0.0 {
            continue;
        }
        match &mu.boundary {
            Some(b) => {
                let rho = b.inner_density[k];
                let cov = d / rho;
                s += cov * rho * rho.ln() * area;
            }
            None => s += d * d.ln() * area,
        }
    }
    s
}

/// `2 pi beta min_Sigma mu_0 / (2 ||Delta xi||_inf)` over grid cells, or
/// `None` when the support of `xi` leaves `Sigma` (boundary regime).
pub fn t_max(eq: &EquilibriumData, xi: &TestFunction, beta: f64) -> Option<f64> {
    if !xi.support_inside(|p| eq.in_sigma(p)) {
        return None;
    }
    let g = eq.grid();
    let mut min_mu = f64::INFINITY;
    let mut sup = 0.0f64;
    for k in 0..g.len() {
        let p = g.center_of(k);
        if eq.sigma.mask.cells[k] {
            min_mu = min_mu.min(eq.density_at(p).max(0.0));
        }
        sup = sup.max(xi.laplacian(p).abs());
    }
    if sup == 0.0 {
        return Some(f64::INFINITY);
    }
    Some(2.0 * PI * beta * min_mu / (2.0 * sup))
}

#[derive(Clone, Debug)]
pub struct PerturbedEquilibrium {
    pub t: f64,
    pub beta: f64,
    pub mu_t: Measure2D,
    pub zeta_t: ScalarField2D,
    pub c_t: f64,
    pub sigma_t: Region,
    pub is_interior_regime: bool,
}

/// `mu_t`: equilibrium measure of `V_t = V - 2 t xi / beta`. In the interior
/// regime it is `mu_0 - t/(2 pi beta) Delta xi` on the same support;
/// otherwise the equilibrium problem is solved again for `V_t`.
pub fn perturbed_equilibrium(
    eq: &EquilibriumData,
    xi: &TestFunction,
    t: f64,
    beta: f64,
    opts: &SolveOptions,
) -> Result<PerturbedEquilibrium> {
    let g = eq.grid();
    let vt = Tilted { base: eq.potential.clone(), xi: xi.clone(), coeff: 2.0 * t / beta };
    match t_max(eq, xi, beta) {
        Some(tm) if t.abs() <= tm => {
            let mut mu = eq.mu0.clone();
            let c = t / (2.0 * PI * beta);
            for k in 0..g.len() {
                if !mu.support_mask.cells[k] {
                    continue;
                }
                let d = c * xi.laplacian(g.center_of(k));
                mu.density.values[k] -= d;
                if let Some(b) = mu.boundary.as_mut() {
                    b.inner_density[k] -= d;
                }
                if mu.density.values[k] < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "perturbed density negative at {:?} although |t| <= t_max",
                        g.center_of(k)
                    )));
                }
            }
            let h = potential_field(&mu);
            let u = ScalarField2D::from_fn(g, |p| vt.value(p) / 2.0).zip_with(&h, |a, b| a + b)?;
            let c_t = u.values.iter().cloned().fold(f64::INFINITY, f64::min);
            Ok(PerturbedEquilibrium {
                t,
                beta,
                mu_t: mu,
                zeta_t: u.map(|x| x - c_t),
                c_t,
                sigma_t: eq.sigma.clone(),
                is_interior_regime: true,
            })
        }
        _ => {
            let sol = solve_equilibrium(Arc::new(vt), g, opts)?;
            Ok(PerturbedEquilibrium {
                t,
                beta,
                mu_t: sol.mu0,
                zeta_t: sol.zeta0,
                c_t: sol.c0,
                sigma_t: sol.sigma,
                is_interior_regime: false,
            })
        }
    }
}

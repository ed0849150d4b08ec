//! Bounded harmonic extension of boundary data to the exterior of a region.
//!
//! The exterior Laplace problem is solved on the grid box with red-black SOR.
//! Cells next to the region use Shortley-Weller stencils when the region has a
//! level set, so the Dirichlet data sit on the true boundary rather than on the
//! staircase. The outer box carries a far-field condition that is refined by
//! a multipole fit on an intermediate circle: the mean mode is solved exactly
//! by superposition, higher modes by fixed-point iteration.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::grid::{Grid2D, LevelSet, Mask, ScalarField2D};
use crate::{Error, Point, Result};

/// Region `Sigma` given as a cell mask, optionally with a sub-cell level set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub mask: Mask,
    pub level: Option<LevelSet>,
}

impl Region {
    pub fn from_mask(mask: Mask) -> Self {
        Self { mask, level: None }
    }

    pub fn from_level(level: LevelSet) -> Self {
        Self { mask: level.mask(), level: Some(level) }
    }

    pub fn grid(&self) -> Grid2D {
        self.mask.grid
    }

    /// Fraction, from exterior cell `e` towards region cell `s`, at which the
    /// boundary is crossed; 1 when only the mask is known.
    pub fn crossing(&self, e: (usize, usize), s: (usize, usize)) -> f64 {
        match &self.level {
            Some(l) => l.crossing(e, s).max(1e-6),
            None => 1.0,
        }
    }

    fn coarsened(&self) -> Option<Region> {
        let cg = self.grid().coarsened()?;
        Some(match &self.level {
            Some(l) => {
                let g = l.grid;
                let mut nodes = Vec::with_capacity((cg.nx + 1) * (cg.ny + 1));
                for j in 0..=cg.ny {
                    for i in 0..=cg.nx {
                        nodes.push(l.nodes[(2 * j) * (g.nx + 1) + 2 * i]);
                    }
                }
                Region::from_level(LevelSet { grid: cg, nodes })
            }
            None => {
                let mut cells = vec![false; cg.len()];
                for j in 0..cg.ny {
                    for i in 0..cg.nx {
                        let n = [(0, 0), (1, 0), (0, 1), (1, 1)]
                            .iter()
                            .filter(|(a, b)| self.mask.get(2 * i + a, 2 * j + b))
                            .count();
                        cells[cg.index(i, j)] = n >= 2;
                    }
                }
                Region::from_mask(Mask { grid: cg, cells })
            }
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HarmonicOptions {
    /// Stop when the largest SOR update falls below this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Number of Fourier modes in the far-field condition.
    pub modes: usize,
    /// Far-field refinement passes; 0 keeps the constant far-field value.
    pub far_field_passes: usize,
}

impl Default for HarmonicOptions {
    fn default() -> Self {
        Self { tol: 1e-11, max_sweeps: 200_000, modes: 12, far_field_passes: 12 }
    }
}

/// Multipole description `a0 + sum_k (rho/r)^k (a_k cos k t + b_k sin k t)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FarField {
    pub center: Point,
    pub rho: f64,
    pub a0: f64,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl FarField {
    pub fn constant(center: Point, rho: f64, a0: f64, modes: usize) -> Self {
        Self { center, rho, a0, cos: vec![0.0; modes], sin: vec![0.0; modes] }
    }

    pub fn value(&self, p: Point) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let r = dx.hypot(dy);
        let t = dy.atan2(dx);
        let q = self.rho / r;
        let mut s = self.a0;
        let mut qk = 1.0;
        for k in 0..self.cos.len() {
            qk *= q;
            let kt = (k + 1) as f64 * t;
            s += qk * (self.cos[k] * kt.cos() + self.sin[k] * kt.sin());
        }
        s
    }

    /// `int_{|x - c| > radius} grad u . grad v` for two multipole fields.
    pub fn tail_pairing(&self, other: &FarField, radius: f64) -> f64 {
        let q2 = (self.rho / radius).powi(2);
        let mut s = 0.0;
        let mut qk = 1.0;
        for k in 0..self.cos.len().min(other.cos.len()) {
            qk *= q2;
            s += PI * (k + 1) as f64 * (self.cos[k] * other.cos[k] + self.sin[k] * other.sin[k]) * qk;
        }
        s
    }

    /// Least-squares Fourier fit of `u` sampled on the circle of radius `rho`.
    pub fn fit(u: &ScalarField2D, center: Point, rho: f64, modes: usize) -> Self {
        let m = 512;
        let mut a0 = 0.0;
        let mut cos = vec![0.0; modes];
        let mut sin = vec![0.0; modes];
        for s in 0..m {
            let t = 2.0 * PI * s as f64 / m as f64;
            let v = u.sample([center[0] + rho * t.cos(), center[1] + rho * t.sin()]);
            a0 += v;
            for k in 0..modes {
                let kt = (k + 1) as f64 * t;
                cos[k] += v * kt.cos();
                sin[k] += v * kt.sin();
            }
        }
        let w = 2.0 / m as f64;
        cos.iter_mut().for_each(|c| *c *= w);
        sin.iter_mut().for_each(|c| *c *= w);
        Self { center, rho, a0: a0 / m as f64, cos, sin }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HarmonicExtension {
    pub field: ScalarField2D,
    pub region: Region,
    pub far: FarField,
    /// Largest normalized residual at termination of the last solve.
    pub last_update: f64,
    /// Multigrid cycles (or relaxation sweeps on fallback) used.
    pub sweeps: usize,
}

#[derive(Clone, Copy)]
enum Kind {
    Fixed,
    Plain,
    Special(usize),
}

struct Stencil {
    /// Neighbour weights, normalized so that the equation reads
    /// `u - sum w_n u_n = f`.
    nbr: [(usize, f64); 4],
    n_nbr: usize,
    /// Diagonal of the unnormalized operator, in Laplacian units.
    d: f64,
}

/// Discrete exterior problem on one grid level.
struct Level {
    grid: Grid2D,
    kind: Vec<Kind>,
    specials: Vec<Stencil>,
    ring: Vec<usize>,
    d_plain: f64,
}

/// Builds the operator for `region`; writes the region data of `xi` into `u`
/// and the boundary contributions of Shortley-Weller arms into `f`.
fn build_level(xi: &(dyn Fn(Point) -> f64 + Sync), region: &Region, u: &mut [f64], f: &mut [f64]) -> Level {
    let g = region.grid();
    let h = g.spacing;
    let mut kind = vec![Kind::Plain; g.len()];
    let mut specials = Vec::new();
    let mut ring = Vec::new();
    let dirs = [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)];
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.index(i, j);
            if region.mask.cells[k] {
                kind[k] = Kind::Fixed;
                u[k] = xi(g.center(i, j));
                continue;
            }
            if g.is_edge(i, j) {
                kind[k] = Kind::Fixed;
                ring.push(k);
                continue;
            }
            if !dirs.iter().any(|&(a, b)| region.mask.get((i as isize + a) as usize, (j as isize + b) as usize)) {
                continue;
            }
            // Shortley-Weller: arm lengths along each axis, in units of h.
            let mut arms = [(1.0, None::<f64>); 4];
            for (d, &(a, b)) in dirs.iter().enumerate() {
                let n = ((i as isize + a) as usize, (j as isize + b) as usize);
                if region.mask.get(n.0, n.1) {
                    let th = region.crossing((i, j), n);
                    let c = g.center(i, j);
                    let p = [c[0] + th * h * a as f64, c[1] + th * h * b as f64];
                    arms[d] = (th, Some(xi(p)));
                }
            }
            let mut nbr = [(0usize, 0.0); 4];
            let mut n_nbr = 0;
            let mut c = 0.0;
            let mut diag = 0.0;
            for axis in 0..2 {
                let (p, m) = (2 * axis, 2 * axis + 1);
                let (a, b) = (arms[p].0, arms[m].0);
                diag += 1.0 / (a * b);
                for (d, len, other) in [(p, a, b), (m, b, a)] {
                    let w = 1.0 / (len * (len + other));
                    match arms[d].1 {
                        Some(v) => c += w * v,
                        None => {
                            let (da, db) = dirs[d];
                            let n = g.index((i as isize + da) as usize, (j as isize + db) as usize);
                            nbr[n_nbr] = (n, w);
                            n_nbr += 1;
                        }
                    }
                }
            }
            for e in nbr.iter_mut().take(n_nbr) {
                e.1 /= diag;
            }
            f[k] = c / diag;
            kind[k] = Kind::Special(specials.len());
            specials.push(Stencil { nbr, n_nbr, d: 2.0 * diag / (h * h) });
        }
    }
    Level { grid: g, kind, specials, ring, d_plain: 4.0 / (h * h) }
}

fn set_far(level: &Level, far: &FarField, u: &mut [f64]) {
    for &k in &level.ring {
        u[k] = far.value(level.grid.center_of(k));
    }
}

fn is_region(region: &Region, k: usize) -> bool {
    region.mask.cells[k]
}

impl Level {
    #[inline]
    fn target(&self, u: &[f64], f: &[f64], k: usize) -> Option<f64> {
        let nx = self.grid.nx;
        match self.kind[k] {
            Kind::Fixed => None,
            Kind::Plain => Some(0.25 * (u[k - 1] + u[k + 1] + u[k - nx] + u[k + nx]) + f[k]),
            Kind::Special(s) => {
                let st = &self.specials[s];
                let mut v = f[k];
                for e in &st.nbr[..st.n_nbr] {
                    v += e.1 * u[e.0];
                }
                Some(v)
            }
        }
    }

    fn diag(&self, k: usize) -> f64 {
        match self.kind[k] {
            Kind::Fixed => 0.0,
            Kind::Plain => self.d_plain,
            Kind::Special(s) => self.specials[s].d,
        }
    }

    /// Red-black relaxation; returns the largest update.
    fn relax(&self, u: &mut [f64], f: &[f64], omega: f64) -> f64 {
        let g = self.grid;
        let mut maxd: f64 = 0.0;
        for color in 0..2 {
            for j in 1..g.ny - 1 {
                let mut i = 1 + (j + 1 + color) % 2;
                while i < g.nx - 1 {
                    let k = j * g.nx + i;
                    if let Some(t) = self.target(u, f, k) {
                        let d = omega * (t - u[k]);
                        u[k] += d;
                        maxd = maxd.max(d.abs());
                    }
                    i += 2;
                }
            }
        }
        maxd
    }

    /// Normalized residual `f + sum w u_n - u` (zero on fixed cells).
    fn residual(&self, u: &[f64], f: &[f64]) -> Vec<f64> {
        (0..self.grid.len()).map(|k| self.target(u, f, k).map_or(0.0, |t| t - u[k])).collect()
    }
}

/// Restriction of physical residuals (four-child average) to the coarse
/// level's normalized right-hand side.
fn restrict(fine: &Level, coarse: &Level, r: &[f64]) -> Vec<f64> {
    let (gf, gc) = (fine.grid, coarse.grid);
    let mut out = vec![0.0; gc.len()];
    for j in 0..gc.ny {
        for i in 0..gc.nx {
            let kc = gc.index(i, j);
            let dc = coarse.diag(kc);
            if dc == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for (a, b) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let kf = gf.index(2 * i + a, 2 * j + b);
                s += fine.diag(kf) * r[kf];
            }
            out[kc] = 0.25 * s / dc;
        }
    }
    out
}

/// Bilinear prolongation of a coarse correction onto free fine cells.
fn prolong_add(fine: &Level, coarse: &Level, e: &[f64], u: &mut [f64]) {
    let (gf, gc) = (fine.grid, coarse.grid);
    let ec = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= gc.nx as isize || j >= gc.ny as isize {
            0.0
        } else {
            e[gc.index(i as usize, j as usize)]
        }
    };
    for j in 0..gf.ny {
        for i in 0..gf.nx {
            let kf = gf.index(i, j);
            if matches!(fine.kind[kf], Kind::Fixed) {
                continue;
            }
            let (ci, cj) = ((i / 2) as isize, (j / 2) as isize);
            let si = if i % 2 == 0 { -1 } else { 1 };
            let sj = if j % 2 == 0 { -1 } else { 1 };
            u[kf] += 0.5625 * ec(ci, cj) + 0.1875 * (ec(ci + si, cj) + ec(ci, cj + sj)) + 0.0625 * ec(ci + si, cj + sj);
        }
    }
}

fn vcycle(levels: &[Level], depth: usize, u: &mut [f64], f: &[f64]) {
    let lv = &levels[depth];
    if depth + 1 == levels.len() {
        let omega = optimal_omega(&lv.grid);
        for _ in 0..4 * lv.grid.nx.max(lv.grid.ny) {
            if lv.relax(u, f, omega) < 1e-15 {
                break;
            }
        }
        return;
    }
    for _ in 0..3 {
        lv.relax(u, f, 1.0);
    }
    let r = lv.residual(u, f);
    let coarse = &levels[depth + 1];
    let fc = restrict(lv, coarse, &r);
    let mut ec = vec![0.0; coarse.grid.len()];
    vcycle(levels, depth + 1, &mut ec, &fc);
    prolong_add(lv, coarse, &ec, u);
    for _ in 0..3 {
        lv.relax(u, f, 1.0);
    }
}

/// Multigrid hierarchy for `region`; only the finest level carries data.
struct Hierarchy {
    levels: Vec<Level>,
    f: Vec<f64>,
}

fn hierarchy(xi: &(dyn Fn(Point) -> f64 + Sync), region: &Region, u: &mut [f64]) -> Hierarchy {
    let mut f = vec![0.0; region.grid().len()];
    let top = build_level(xi, region, u, &mut f);
    let mut levels = vec![top];
    let mut r = region.clone();
    while r.grid().nx.min(r.grid().ny) >= 32 {
        let Some(c) = r.coarsened() else { break };
        if c.mask.is_empty() {
            break;
        }
        let zero = |_: Point| 0.0;
        let mut du = vec![0.0; c.grid().len()];
        let mut df = vec![0.0; c.grid().len()];
        levels.push(build_level(&zero, &c, &mut du, &mut df));
        r = c;
    }
    Hierarchy { levels, f }
}

/// Multigrid cycles until the largest normalized residual is below `tol`,
/// falling back to SOR if cycling stalls.
fn solve(hy: &Hierarchy, u: &mut [f64], opts: &HarmonicOptions) -> Result<(f64, usize)> {
    let top = &hy.levels[0];
    let mut prev = f64::INFINITY;
    for cycle in 0..200 {
        let r = top.residual(u, &hy.f).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if r < opts.tol {
            return Ok((r, cycle));
        }
        if !r.is_finite() || (cycle > 10 && r > 0.7 * prev) {
            break;
        }
        prev = r;
        vcycle(&hy.levels, 0, u, &hy.f);
    }
    let omega = optimal_omega(&top.grid);
    let mut last = f64::INFINITY;
    for sweep in 0..opts.max_sweeps {
        last = top.relax(u, &hy.f, omega);
        if last < opts.tol {
            return Ok((last, sweep));
        }
    }
    Err(Error::NoConvergence(format!("exterior solve stalled at update {last:e}")))
}

fn optimal_omega(g: &Grid2D) -> f64 {
    let n = g.nx.max(g.ny) as f64;
    2.0 / (1.0 + (PI / n).sin())
}

struct Geometry {
    center: Point,
    r_sigma: f64,
    r_box: f64,
    rho: f64,
}

fn geometry(region: &Region) -> Geometry {
    let g = region.grid();
    let center = region.mask.centroid();
    let mut r_sigma: f64 = 0.0;
    for (k, &c) in region.mask.cells.iter().enumerate() {
        if c {
            let p = g.center_of(k);
            r_sigma = r_sigma.max(crate::norm([p[0] - center[0], p[1] - center[1]]));
        }
    }
    r_sigma += g.spacing;
    let u = g.upper();
    let r_box = (center[0] - g.origin[0]).min(u[0] - center[0]).min(center[1] - g.origin[1]).min(u[1] - center[1]);
    // A fitting circle close to the region makes the far-field iteration
    // contract fast; keep it a few cells clear of the boundary stencils.
    let rho = (r_sigma * 1.15).max(r_sigma + 4.0 * g.spacing).min(0.5 * (r_sigma + r_box));
    Geometry { center, r_sigma, r_box, rho }
}

fn boundary_mean(xi: &(dyn Fn(Point) -> f64 + Sync), region: &Region) -> f64 {
    let b = region.mask.boundary_cells();
    let g = region.grid();
    b.iter().map(|&(i, j)| xi(g.center(i, j))).sum::<f64>() / b.len() as f64
}

/// Bounded harmonic extension of `xi` from `region` to the whole box.
pub fn harmonic_extension(
    xi: &(dyn Fn(Point) -> f64 + Sync),
    region: &Region,
    opts: &HarmonicOptions,
) -> Result<HarmonicExtension> {
    if region.mask.is_empty() {
        return Err(Error::EmptySupport);
    }
    let g = region.grid();
    let geo = geometry(region);
    if geo.r_box <= geo.r_sigma * 1.3 {
        return Err(Error::InvalidInput(format!(
            "grid box too small: inscribed radius {} vs region radius {}",
            geo.r_box, geo.r_sigma
        )));
    }
    let mut far = FarField::constant(geo.center, geo.rho, boundary_mean(xi, region), opts.modes);
    let mut u = vec![far.a0; g.len()];
    let hy = hierarchy(xi, region, &mut u);
    set_far(&hy.levels[0], &far, &mut u);
    let (mut last, mut sweeps) = solve(&hy, &mut u, opts)?;
    if opts.far_field_passes > 0 {
        // Circle mean of the solution with zero data on the region and unit
        // far-field constant; the mean mode then follows by superposition.
        let zero = |_: Point| 0.0;
        let mut w = vec![1.0; g.len()];
        let hw = hierarchy(&zero, region, &mut w);
        set_far(&hw.levels[0], &FarField::constant(geo.center, geo.rho, 1.0, 0), &mut w);
        solve(&hw, &mut w, opts)?;
        let w_rho = FarField::fit(&ScalarField2D { grid: g, values: w }, geo.center, geo.rho, 0).a0;
        let scale = u.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for _ in 0..opts.far_field_passes {
            let fit = FarField::fit(&ScalarField2D { grid: g, values: u.clone() }, geo.center, geo.rho, opts.modes);
            let m0 = fit.a0 - far.a0 * w_rho;
            let next = FarField { a0: m0 / (1.0 - w_rho), ..fit };
            let change = (next.a0 - far.a0)
                .abs()
                .max(next.cos.iter().zip(&far.cos).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .max(next.sin.iter().zip(&far.sin).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            far = next;
            set_far(&hy.levels[0], &far, &mut u);
            let (d, s) = solve(&hy, &mut u, opts)?;
            last = d;
            sweeps += s;
            if change < 1e-9 * scale {
                break;
            }
        }
    }
    Ok(HarmonicExtension { field: ScalarField2D { grid: g, values: u }, region: region.clone(), far, last_update: last, sweeps })
}

impl HarmonicExtension {
    /// `int_{R^2} grad u . grad v` for two extensions on the same region:
    /// analytic gradients inside the region, edge differences outside with
    /// partial edges at the boundary, and the multipole tail beyond the
    /// largest circle inside the box.
    pub fn pairing(
        &self,
        other: &HarmonicExtension,
        xi_a: &(dyn Fn(Point) -> f64 + Sync),
        grad_a: &(dyn Fn(Point) -> [f64; 2] + Sync),
        xi_b: &(dyn Fn(Point) -> f64 + Sync),
        grad_b: &(dyn Fn(Point) -> [f64; 2] + Sync),
    ) -> Result<f64> {
        let g = self.field.grid;
        g.check_same(&other.field.grid, "extension pairing")?;
        let region = &self.region;
        let interior = region_integral(region, &|p| {
            let a = grad_a(p);
            let b = grad_b(p);
            a[0] * b[0] + a[1] * b[1]
        });
        let geo = geometry(region);
        let cut = 0.95 * geo.r_box;
        let h = g.spacing;
        let ua = &self.field.values;
        let ub = &other.field.values;
        let mut ext = 0.0;
        for j in 0..g.ny {
            for i in 0..g.nx {
                for (di, dj) in [(1usize, 0usize), (0, 1)] {
                    let (i2, j2) = (i + di, j + dj);
                    if i2 >= g.nx || j2 >= g.ny {
                        continue;
                    }
                    let (k1, k2) = (g.index(i, j), g.index(i2, j2));
                    let (s1, s2) = (is_region(region, k1), is_region(region, k2));
                    if s1 && s2 {
                        continue;
                    }
                    let c1 = g.center(i, j);
                    let mid = [c1[0] + 0.5 * h * di as f64, c1[1] + 0.5 * h * dj as f64];
                    if crate::norm([mid[0] - geo.center[0], mid[1] - geo.center[1]]) > cut {
                        continue;
                    }
                    if !s1 && !s2 {
                        ext += (ua[k1] - ua[k2]) * (ub[k1] - ub[k2]);
                    } else {
                        let (e, s, ke) = if s1 { ((i2, j2), (i, j), k2) } else { ((i, j), (i2, j2), k1) };
                        let th = region.crossing(e, s);
                        let ce = g.center(e.0, e.1);
                        let cs = g.center(s.0, s.1);
                        let p = [ce[0] + th * (cs[0] - ce[0]), ce[1] + th * (cs[1] - ce[1])];
                        ext += (ua[ke] - xi_a(p)) * (ub[ke] - xi_b(p)) / th;
                    }
                }
            }
        }
        Ok(interior + ext + self.far.tail_pairing(&other.far, cut))
    }

    /// `int_{R^2} |grad xi^Sigma|^2` with the discretization of [`Self::pairing`].
    pub fn energy(
        &self,
        xi: &(dyn Fn(Point) -> f64 + Sync),
        grad: &(dyn Fn(Point) -> [f64; 2] + Sync),
    ) -> Result<f64> {
        self.pairing(self, xi, grad, xi, grad)
    }
}

/// `int_region f` with sub-cell resolution of cut cells when available.
pub fn region_integral(region: &Region, f: &(dyn Fn(Point) -> f64 + Sync)) -> f64 {
    use rayon::prelude::*;
    let g = region.grid();
    let area = g.cell_area();
    let sub = (super::grid::SUBCELL * super::grid::SUBCELL) as f64;
    (0..g.ny)
        .into_par_iter()
        .map(|j| {
            let mut s = 0.0;
            for i in 0..g.nx {
                match &region.level {
                    Some(l) if l.is_cut(i, j) => {
                        for p in l.inside_subsamples(i, j) {
                            s += f(p) * area / sub;
                        }
                    }
                    Some(l) => {
                        if l.center_value(i, j) <= 0.0 {
                            s += f(g.center(i, j)) * area;
                        }
                    }
                    None => {
                        if region.mask.get(i, j) {
                            s += f(g.center(i, j)) * area;
                        }
                    }
                }
            }
            s
        })
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

/// Normal derivative jump across the boundary of the region.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JumpSample {
    pub point: Point,
    pub normal: [f64; 2],
    /// Inner minus outer normal derivative.
    pub jump: f64,
    /// Boundary cell the sample was taken from.
    pub cell: (usize, usize),
}

/// Samples `d_n u(inside) - d_n u(outside)` at boundary points, one per
/// boundary cell, using one-sided quadratic fits along the outward normal.
/// Cells whose normal cannot be estimated are skipped and counted.
pub fn neumann_jump(u: &ScalarField2D, region: &Region) -> Result<(Vec<JumpSample>, usize)> {
    u.grid.check_same(&region.grid(), "neumann jump")?;
    let g = u.grid;
    let h = g.spacing;
    let level = match &region.level {
        Some(l) => l.clone(),
        None => smoothed_level(&region.mask),
    };
    let mut out = Vec::new();
    let mut flagged = 0;
    for (i, j) in region.mask.boundary_cells() {
        let c = g.center(i, j);
        let Some(p) = level.project(c) else {
            flagged += 1;
            continue;
        };
        let Some(n) = level.normal(p) else {
            flagged += 1;
            continue;
        };
        let at = |d: f64| u.sample([p[0] + d * n[0], p[1] + d * n[1]]);
        // Quadratic fits through samples one and a half to three and a half
        // cells from the boundary on each side, where the bilinear stencil no
        // longer straddles the kink; derivatives extrapolated to the boundary.
        let d = [1.5 * h, 2.5 * h, 3.5 * h];
        let w = [
            -(d[1] + d[2]) / ((d[0] - d[1]) * (d[0] - d[2])),
            -(d[0] + d[2]) / ((d[1] - d[0]) * (d[1] - d[2])),
            -(d[0] + d[1]) / ((d[2] - d[0]) * (d[2] - d[1])),
        ];
        let out_d: f64 = (0..3).map(|m| w[m] * at(d[m])).sum();
        let in_d: f64 = -(0..3).map(|m| w[m] * at(-d[m])).sum::<f64>();
        out.push(JumpSample { point: p, normal: n, jump: in_d - out_d, cell: (i, j) });
    }
    Ok((out, flagged))
}

/// Level function from a binary mask: `1/2` minus the bilinear average of the
/// indicator over the four cells around each node, scaled by the spacing.
pub fn smoothed_level(mask: &Mask) -> LevelSet {
    let g = mask.grid;
    let mut nodes = Vec::with_capacity((g.nx + 1) * (g.ny + 1));
    for j in 0..=g.ny {
        for i in 0..=g.nx {
            let mut s = 0.0;
            for (a, b) in [(0isize, 0isize), (-1, 0), (0, -1), (-1, -1)] {
                let (ci, cj) = (i as isize + a, j as isize + b);
                if ci >= 0 && cj >= 0 && (ci as usize) < g.nx && (cj as usize) < g.ny && mask.get(ci as usize, cj as usize) {
                    s += 0.25;
                }
            }
            nodes.push((0.5 - s) * g.spacing * 2.0);
        }
    }
    LevelSet { grid: g, nodes }
}

//! Transport of the equilibrium measure along `phi_t = Id + (t/beta) psi`.
//!
//! `psi` is built so that `div(mu_0 psi) = Delta xi / 2 pi` inside the
//! droplet, which makes `phi_t # mu_0` agree with the equilibrium measure of
//! `V - 2 t xi / beta` up to `O(t^2)`. The module also evaluates the
//! anisotropy functional, transported electric fields, and the first-order
//! energy comparison along the transport.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{gauss_legendre, nn_truncation, truncated_potential_field, Background, Configuration, TruncationVector};
use crate::equilibrium::EquilibriumData;
use crate::field::{neumann_jump, Grid2D, LevelSet, Mask, Measure2D, ScalarField2D, VectorField2D};
use crate::fluctuations::{check_compatibility, extend};
use crate::potential::Potential;
use crate::test_function::TestFunction;
use crate::{Error, Point, Result};

/// `m[r][c] = d psi_r / d x_c`.
pub type Mat = [[f64; 2]; 2];

fn det(m: &Mat) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

fn mat_vec(m: &Mat, v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Largest singular value.
fn op_norm(m: &Mat) -> f64 {
    let a = m[0][0] * m[0][0] + m[1][0] * m[1][0];
    let b = m[0][0] * m[0][1] + m[1][0] * m[1][1];
    let d = m[0][1] * m[0][1] + m[1][1] * m[1][1];
    let tr = 0.5 * (a + d);
    (tr + (0.25 * (a - d) * (a - d) + b * b).sqrt()).sqrt()
}

fn frob_diff(a: &Mat, b: &Mat) -> f64 {
    let mut s = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            s += (a[r][c] - b[r][c]).powi(2);
        }
    }
    s.sqrt()
}

/// `2 D psi - (div psi) Id`; trace-free by construction.
pub fn anisotropy_matrix(d: &Mat) -> Mat {
    let div = d[0][0] + d[1][1];
    [[2.0 * d[0][0] - div, 2.0 * d[0][1]], [2.0 * d[1][0], 2.0 * d[1][1] - div]]
}

/// Bilinear interpolation of a cell-centred vector field together with the
/// exact derivative of the interpolant; clamped at the box edge.
fn bilinear(f: &VectorField2D, p: Point) -> ([f64; 2], Mat) {
    let g = &f.grid;
    let h = g.spacing;
    let fx = ((p[0] - g.origin[0]) / h - 0.5).clamp(0.0, (g.nx - 1) as f64);
    let fy = ((p[1] - g.origin[1]) / h - 0.5).clamp(0.0, (g.ny - 1) as f64);
    let i0 = (fx as usize).min(g.nx - 2);
    let j0 = (fy as usize).min(g.ny - 2);
    let tx = fx - i0 as f64;
    let ty = fy - j0 as f64;
    let (v00, v10, v01, v11) = (f.at(i0, j0), f.at(i0 + 1, j0), f.at(i0, j0 + 1), f.at(i0 + 1, j0 + 1));
    let mut val = [0.0; 2];
    let mut jac = [[0.0; 2]; 2];
    for c in 0..2 {
        val[c] = (1.0 - ty) * ((1.0 - tx) * v00[c] + tx * v10[c]) + ty * ((1.0 - tx) * v01[c] + tx * v11[c]);
        jac[c][0] = ((1.0 - ty) * (v10[c] - v00[c]) + ty * (v11[c] - v01[c])) / h;
        jac[c][1] = ((1.0 - tx) * (v01[c] - v00[c]) + tx * (v11[c] - v10[c])) / h;
    }
    (val, jac)
}

/// Centred-difference Jacobian of a grid vector field, one-sided at the edges.
pub fn grid_jacobian(f: &VectorField2D) -> Vec<Mat> {
    let g = f.grid;
    let h = g.spacing;
    (0..g.len())
        .map(|k| {
            let (i, j) = g.coords(k);
            let (ia, ib, wx) = if i == 0 {
                (0, 1, h)
            } else if i + 1 == g.nx {
                (i - 1, i, h)
            } else {
                (i - 1, i + 1, 2.0 * h)
            };
            let (ja, jb, wy) = if j == 0 {
                (0, 1, h)
            } else if j + 1 == g.ny {
                (j - 1, j, h)
            } else {
                (j - 1, j + 1, 2.0 * h)
            };
            let mut m = [[0.0; 2]; 2];
            for c in 0..2 {
                m[c][0] = (f.at(ib, j)[c] - f.at(ia, j)[c]) / wx;
                m[c][1] = (f.at(i, jb)[c] - f.at(i, ja)[c]) / wy;
            }
            m
        })
        .collect()
}

#[derive(Clone)]
enum Closure {
    /// Bilinear interpolation of the stored field.
    Grid,
    /// `2 grad xi / Delta V`.
    Interior { xi: TestFunction, potential: Arc<dyn Potential> },
}

/// Norm estimates of a grid field from cell differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridNorms {
    pub sup: f64,
    /// Largest operator norm of the difference Jacobian.
    pub lipschitz: f64,
    /// Largest Frobenius norm of the difference Jacobian.
    pub sup_jacobian: f64,
    /// Largest Jacobian increment between neighbouring cells over the spacing.
    pub jacobian_lipschitz: f64,
}

pub fn grid_norms(psi: &VectorField2D, jac: &[Mat]) -> GridNorms {
    let g = psi.grid;
    let h = g.spacing;
    let sup = psi.values.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max);
    let lipschitz = jac.iter().map(op_norm).fold(0.0, f64::max);
    let sup_jacobian = jac.iter().map(|m| frob_diff(m, &[[0.0; 2]; 2])).fold(0.0, f64::max);
    let mut jl = 0.0f64;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.index(i, j);
            if i + 1 < g.nx {
                jl = jl.max(frob_diff(&jac[k], &jac[g.index(i + 1, j)]) / h);
            }
            if j + 1 < g.ny {
                jl = jl.max(frob_diff(&jac[k], &jac[g.index(i, j + 1)]) / h);
            }
        }
    }
    GridNorms { sup, lipschitz, sup_jacobian, jacobian_lipschitz: jl }
}

/// A transport field `psi` on a grid, with its Jacobian per cell and norms.
#[derive(Clone, Serialize, Deserialize)]
pub struct TransportMap {
    pub psi: VectorField2D,
    pub jacobian: Vec<Mat>,
    /// `sup |psi| + Lip(psi)`
    pub c01_norm: f64,
    /// `sup |D psi| + Lip(D psi)`
    pub c11_norm: f64,
    pub norms: GridNorms,
    /// Cells where `psi` or its Jacobian is non-zero.
    pub support: Mask,
    /// Relative weak-form residual of the divergence identity defining `psi`.
    pub residual: f64,
    /// `sup|psi| / sup|grad xi|` and `Lip(psi) / sup|D^2 xi|`.
    pub regularity: [f64; 2],
    #[serde(skip, default = "grid_closure")]
    closure: Closure,
}

fn grid_closure() -> Closure {
    Closure::Grid
}

impl fmt::Debug for TransportMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransportMap")
            .field("grid", &self.psi.grid)
            .field("c01_norm", &self.c01_norm)
            .field("c11_norm", &self.c11_norm)
            .field("residual", &self.residual)
            .finish()
    }
}

fn support_of(psi: &VectorField2D, jac: &[Mat]) -> Mask {
    let cells = psi
        .values
        .iter()
        .zip(jac)
        .map(|(v, m)| v[0] != 0.0 || v[1] != 0.0 || m.iter().flatten().any(|x| *x != 0.0))
        .collect();
    Mask { grid: psi.grid, cells }
}

impl TransportMap {
    /// A map interpolating a given grid field; Jacobian by centred differences.
    pub fn from_field(psi: VectorField2D) -> Self {
        let jacobian = grid_jacobian(&psi);
        Self::assemble(psi, jacobian, Closure::Grid)
    }

    fn assemble(psi: VectorField2D, jacobian: Vec<Mat>, closure: Closure) -> Self {
        // norms always come from grid differences, whatever the closure
        let diff = grid_jacobian(&psi);
        let norms = grid_norms(&psi, &diff);
        let support = support_of(&psi, &jacobian);
        Self {
            c01_norm: norms.sup + norms.lipschitz,
            c11_norm: norms.sup_jacobian + norms.jacobian_lipschitz,
            norms,
            support,
            residual: 0.0,
            regularity: [0.0; 2],
            psi,
            jacobian,
            closure,
        }
    }

    pub fn grid(&self) -> Grid2D {
        self.psi.grid
    }

    pub fn psi_at(&self, p: Point) -> [f64; 2] {
        match &self.closure {
            Closure::Grid => bilinear(&self.psi, p).0,
            Closure::Interior { xi, potential } => interior_psi(xi, potential.as_ref(), p),
        }
    }

    pub fn jacobian_at(&self, p: Point) -> Mat {
        match &self.closure {
            Closure::Grid => bilinear(&self.psi, p).1,
            Closure::Interior { xi, potential } => interior_jacobian(xi, potential.as_ref(), p),
        }
    }

    pub fn div_at(&self, p: Point) -> f64 {
        let m = self.jacobian_at(p);
        m[0][0] + m[1][1]
    }

    /// `beta / (2 ||psi||_{C^{0,1}})`
    pub fn t_tilde_max(&self, beta: f64) -> f64 {
        if self.c01_norm == 0.0 {
            f64::INFINITY
        } else {
            beta / (2.0 * self.c01_norm)
        }
    }

    /// `x + (t/beta) psi(x)`
    pub fn phi(&self, t: f64, beta: f64, x: Point) -> Point {
        let v = self.psi_at(x);
        [x[0] + t / beta * v[0], x[1] + t / beta * v[1]]
    }

    /// `Id + (t/beta) D psi` at `x`.
    pub fn phi_jacobian(&self, t: f64, beta: f64, x: Point) -> Mat {
        let m = self.jacobian_at(x);
        let c = t / beta;
        [[1.0 + c * m[0][0], c * m[0][1]], [c * m[1][0], 1.0 + c * m[1][1]]]
    }

    /// `phi_t^{-1}(y)` by Newton iteration from `y`: at most 20 steps, to
    /// `1e-12` times the grid spacing.
    pub fn inverse(&self, t: f64, beta: f64, y: Point) -> Result<Point> {
        if t == 0.0 {
            return Ok(y);
        }
        let tol = 1e-12 * self.grid().spacing;
        let mut z = y;
        for _ in 0..20 {
            let f = self.phi(t, beta, z);
            let r = [f[0] - y[0], f[1] - y[1]];
            if r[0].hypot(r[1]) <= tol {
                return Ok(z);
            }
            let j = self.phi_jacobian(t, beta, z);
            let d = det(&j);
            if d <= 0.0 {
                return Err(Error::Assumption(format!("transport not invertible at {z:?}: det = {d}")));
            }
            z = [z[0] - (j[1][1] * r[0] - j[0][1] * r[1]) / d, z[1] - (-j[1][0] * r[0] + j[0][0] * r[1]) / d];
        }
        let f = self.phi(t, beta, z);
        if (f[0] - y[0]).hypot(f[1] - y[1]) <= tol {
            Ok(z)
        } else {
            Err(Error::NoConvergence(format!("Newton inversion of the transport at {y:?}")))
        }
    }

    /// Writes the field components (binary) and a JSON manifest.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (c, name) in ["psi_x.bin", "psi_y.bin"].iter().enumerate() {
            let f = std::fs::File::create(dir.join(name))?;
            crate::field::io::write_binary(&self.psi.component(c), std::io::BufWriter::new(f))?;
        }
        let manifest = serde_json::json!({
            "grid": self.psi.grid,
            "c01_norm": self.c01_norm,
            "c11_norm": self.c11_norm,
            "norms": self.norms,
            "residual": self.residual,
            "regularity": self.regularity,
            "support_cells": self.support.count(),
        });
        std::fs::write(dir.join("transport.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn interior_psi(xi: &TestFunction, v: &dyn Potential, p: Point) -> [f64; 2] {
    let g = xi.gradient(p);
    if g == [0.0, 0.0] {
        return g;
    }
    let l = v.laplacian(p);
    [2.0 * g[0] / l, 2.0 * g[1] / l]
}

fn interior_jacobian(xi: &TestFunction, v: &dyn Potential, p: Point) -> Mat {
    let g = xi.gradient(p);
    let hs = xi.hessian(p);
    if g == [0.0, 0.0] && hs.iter().flatten().all(|x| *x == 0.0) {
        return [[0.0; 2]; 2];
    }
    let l = v.laplacian(p);
    let d = 1e-4;
    let dl = [
        (v.laplacian([p[0] + d, p[1]]) - v.laplacian([p[0] - d, p[1]])) / (2.0 * d),
        (v.laplacian([p[0], p[1] + d]) - v.laplacian([p[0], p[1] - d])) / (2.0 * d),
    ];
    let mut m = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            m[r][c] = 2.0 * hs[r][c] / l - 2.0 * g[r] * dl[c] / (l * l);
        }
    }
    m
}

/// Smooth test fields used for weak-form residuals, placed around `center`.
fn weak_probes(center: Point, radius: f64) -> Vec<TestFunction> {
    let r = radius.max(1e-3);
    vec![
        TestFunction::bump(center, 1.3 * r, 1.0),
        TestFunction::bump([center[0] + 0.4 * r, center[1]], r, 1.0),
        TestFunction::bump([center[0], center[1] - 0.5 * r], 0.8 * r, 1.0),
    ]
}

/// Gradient of `phi` by centred differences at the grid spacing.
fn grid_grad(phi: &TestFunction, p: Point, h: f64) -> [f64; 2] {
    [
        (phi.value([p[0] + h, p[1]]) - phi.value([p[0] - h, p[1]])) / (2.0 * h),
        (phi.value([p[0], p[1] + h]) - phi.value([p[0], p[1] - h])) / (2.0 * h),
    ]
}

/// `psi = grad xi / (2 pi mu_0)` with `mu_0 = Delta V / 4 pi`, for `xi`
/// supported inside the droplet.
pub fn build_psi_interior(xi: &TestFunction, eq: &EquilibriumData) -> Result<TransportMap> {
    if !xi.support_inside(|p| eq.in_sigma(p)) {
        return Err(Error::Assumption(format!("support of {} leaves the droplet", xi.name)));
    }
    let g = eq.grid();
    let v = eq.potential.clone();
    let rad = xi.support_radius();
    let min_mu = (0..g.len())
        .map(|k| g.center_of(k))
        .filter(|p| crate::dist2(*p, xi.center) <= rad * rad)
        .map(|p| v.laplacian(p) / (4.0 * PI))
        .fold(f64::INFINITY, f64::min);
    if !(min_mu > 1e-12) {
        return Err(Error::Assumption("equilibrium density vanishes on the support of xi".into()));
    }
    let psi = VectorField2D::from_fn(g, |p| interior_psi(xi, v.as_ref(), p));
    let jacobian: Vec<Mat> = (0..g.len()).into_par_iter().map(|k| interior_jacobian(xi, v.as_ref(), g.center_of(k))).collect();
    let mut map = TransportMap::assemble(psi, jacobian, Closure::Interior { xi: xi.clone(), potential: v.clone() });

    // weak residual of div(mu_0 psi) = Delta xi / 2 pi against smooth probes
    let h = g.spacing;
    let area = g.cell_area();
    let mut worst = 0.0f64;
    for phi in weak_probes(xi.center, rad) {
        let (mut res, mut scale) = (0.0, 0.0);
        for k in 0..g.len() {
            let p = g.center_of(k);
            let s = map.psi.values[k];
            let lap = xi.laplacian(p);
            if s == [0.0, 0.0] && lap == 0.0 {
                continue;
            }
            let mu = v.laplacian(p) / (4.0 * PI);
            let gp = grid_grad(&phi, p, h);
            let a = mu * (s[0] * gp[0] + s[1] * gp[1]);
            let b = phi.value(p) * lap / (2.0 * PI);
            res += (a + b) * area;
            scale += b.abs() * area;
        }
        if scale > 0.0 {
            worst = worst.max(res.abs() / scale);
        }
    }
    map.residual = worst;

    let (mut sg, mut sh) = (0.0f64, 0.0f64);
    for k in 0..g.len() {
        let p = g.center_of(k);
        let gr = xi.gradient(p);
        sg = sg.max(gr[0].hypot(gr[1]));
        sh = sh.max(op_norm(&xi.hessian(p)));
    }
    map.regularity = [
        if sg > 0.0 { map.norms.sup / sg } else { 0.0 },
        if sh > 0.0 { map.norms.lipschitz / sh } else { 0.0 },
    ];
    Ok(map)
}

/// Conjugate gradients for the symmetric positive semi-definite system given
/// by `apply`, with Jacobi preconditioning and the constant mode of each
/// component projected out.
fn cg_neumann(
    apply: &dyn Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    labels: &[usize],
    ncomp: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let n = b.len();
    let project = |v: &mut [f64]| {
        let mut sum = vec![0.0; ncomp];
        let mut cnt = vec![0.0; ncomp];
        for (k, x) in v.iter().enumerate() {
            sum[labels[k]] += x;
            cnt[labels[k]] += 1.0;
        }
        for (k, x) in v.iter_mut().enumerate() {
            *x -= sum[labels[k]] / cnt[labels[k]];
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    project(&mut r);
    let bnorm = dot(&r, &r).sqrt().max(1e-300);
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(a, d)| a / d).collect();
    project(&mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..20 * n.max(10) {
        if dot(&r, &r).sqrt() <= tol * bnorm {
            project(&mut x);
            return Ok(x);
        }
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        z = r.iter().zip(diag).map(|(a, d)| a / d).collect();
        project(&mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(Error::NoConvergence("Neumann conjugate-gradient solve".into()))
}

fn smoothstep_cutoff(d: f64, d1: f64) -> f64 {
    if d <= d1 {
        1.0
    } else if d >= 2.0 * d1 {
        0.0
    } else {
        let x = (d - d1) / d1;
        1.0 - x * x * (3.0 - 2.0 * x)
    }
}

/// Boundary-case transport: inside each component of `Sigma`, `psi = grad u`
/// with `div(mu_0 grad u) = Delta xi / 2 pi` and
/// `d_n u = [grad xi^Sigma] . n / (2 pi mu_0)`; outside,
/// `psi = (xi - xi^Sigma) grad zeta_0 / |grad zeta_0|^2 + psi_perp`, times a
/// cutoff equal to one near `Sigma`.
pub fn build_psi_boundary(xi: &TestFunction, eq: &EquilibriumData) -> Result<TransportMap> {
    let compat = check_compatibility(xi, eq)?;
    if !compat.satisfied(5e-2) {
        return Err(Error::Assumption(format!("compatibility fluxes {:?} exceed tolerance", compat.fluxes)));
    }
    let g = eq.grid();
    let h = g.spacing;
    let area = g.cell_area();
    let v = eq.potential.clone();
    let region = &eq.sigma;
    let mask = &region.mask;
    let ext = extend(xi, region)?;
    let (jumps, _) = neumann_jump(&ext.field, region)?;
    if jumps.is_empty() {
        return Err(Error::EmptySupport);
    }

    // unknowns on the cells of Sigma, grouped by component
    let (labels, ncomp) = mask.components();
    let mut index = vec![usize::MAX; g.len()];
    let mut cells = Vec::new();
    for k in 0..g.len() {
        if mask.cells[k] {
            index[k] = cells.len();
            cells.push(k);
        }
    }
    let n = cells.len();
    let comp: Vec<usize> = cells.iter().map(|&k| labels[k].unwrap_or(0)).collect();
    let mu = |p: Point| v.laplacian(p) / (4.0 * PI);
    let neighbours = |k: usize| -> [Option<usize>; 4] {
        let (i, j) = g.coords(k);
        let mut out = [None; 4];
        let cand = [(i as isize - 1, j as isize), (i as isize + 1, j as isize), (i as isize, j as isize - 1), (i as isize, j as isize + 1)];
        for (m, (a, b)) in cand.iter().enumerate() {
            if *a >= 0 && *b >= 0 && (*a as usize) < g.nx && (*b as usize) < g.ny {
                out[m] = Some(g.index(*a as usize, *b as usize));
            }
        }
        out
    };
    // face conductances (harmonic mean of the cell densities)
    let mut faces: Vec<[(usize, f64); 4]> = vec![[(usize::MAX, 0.0); 4]; n];
    let mut diag = vec![0.0; n];
    for (u, &k) in cells.iter().enumerate() {
        let mk = mu(g.center_of(k));
        for (m, nb) in neighbours(k).iter().enumerate() {
            match nb {
                Some(q) if mask.cells[*q] => {
                    let mq = mu(g.center_of(*q));
                    let c = 2.0 * mk * mq / (mk + mq);
                    faces[u][m] = (index[*q], c);
                    diag[u] += c;
                }
                _ => {}
            }
        }
    }
    // boundary flux through the open faces of each sampled cell:
    // mu grad u . e h with grad u = g n + tau t on the boundary, where
    // mu g = jump / 2 pi and the tangential derivative tau is refreshed from
    // the previous solve (a few fixed-point rounds, starting from zero)
    let mut base = vec![0.0; n];
    for (u, &k) in cells.iter().enumerate() {
        base[u] = -xi.laplacian(g.center_of(k)) / (2.0 * PI) * area;
    }
    for d in diag.iter_mut() {
        if *d == 0.0 {
            *d = 1.0;
        }
    }
    let apply = |x: &[f64], y: &mut [f64]| {
        for u in 0..x.len() {
            let mut s = 0.0;
            for &(q, c) in &faces[u] {
                if q != usize::MAX {
                    s += c * (x[u] - x[q]);
                }
            }
            y[u] = s;
        }
    };
    let dirs = [[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]];
    let open_faces: Vec<Vec<[f64; 2]>> = jumps
        .iter()
        .map(|s| {
            let k = g.index(s.cell.0, s.cell.1);
            neighbours(k).iter().zip(&dirs).filter(|(nb, _)| !nb.is_some_and(|q| mask.cells[q])).map(|(_, e)| *e).collect()
        })
        .collect();
    let depth1: Vec<bool> = {
        let b0: Vec<bool> = (0..g.len()).map(|k| mask.cells[k] && neighbours(k).iter().any(|q| !q.is_some_and(|q| mask.cells[q]))).collect();
        (0..g.len()).map(|k| b0[k] || (mask.cells[k] && neighbours(k).iter().any(|q| q.is_some_and(|q| b0[q])))).collect()
    };
    let mut tau = vec![0.0; jumps.len()];
    let mut deep = VectorField2D::zeros(g);
    for _round in 0..6 {
        let mut b = base.clone();
        for (m, s) in jumps.iter().enumerate() {
            let u = index[g.index(s.cell.0, s.cell.1)];
            let t = [-s.normal[1], s.normal[0]];
            let mp = mu(s.point);
            for e in &open_faces[m] {
                let ne = s.normal[0] * e[0] + s.normal[1] * e[1];
                let te = t[0] * e[0] + t[1] * e[1];
                b[u] += (s.jump / (2.0 * PI) * ne + mp * tau[m] * te) * h;
            }
        }
        let u = cg_neumann(&apply, &diag, &b, &comp, ncomp.max(1), 1e-10)?;
        // centred differences two or more cells inside
        let mut values = vec![[0.0; 2]; g.len()];
        for &k in &cells {
            if depth1[k] {
                continue;
            }
            let nb = neighbours(k);
            let val = |o: Option<usize>| u[index[o.expect("interior cell")]];
            values[k] = [(val(nb[1]) - val(nb[0])) / (2.0 * h), (val(nb[3]) - val(nb[2])) / (2.0 * h)];
        }
        deep = VectorField2D { grid: g, values };
        for (m, s) in jumps.iter().enumerate() {
            let v = bilinear(&deep, [s.point[0] - 3.5 * h * s.normal[0], s.point[1] - 3.5 * h * s.normal[1]]).0;
            tau[m] = -v[0] * s.normal[1] + v[1] * s.normal[0];
        }
    }
    // the boundary layer is extrapolated along the normal from deeper cells
    let mut psi = deep.values.clone();
    let nearest = |p: Point| {
        jumps.iter().map(|s| (s, crate::dist2(s.point, p))).min_by(|a, c| a.1.total_cmp(&c.1)).map(|(s, d)| (s, d.sqrt())).expect("non-empty jumps")
    };
    for &k in &cells {
        if depth1[k] {
            let (s, _) = nearest(g.center_of(k));
            psi[k] = bilinear(&deep, [s.point[0] - 3.5 * h * s.normal[0], s.point[1] - 3.5 * h * s.normal[1]]).0;
        }
    }

    // exterior construction
    let grad_zeta = crate::field::gradient(&eq.zeta0);
    // diameter of Sigma from the boundary samples
    let diameter = jumps
        .par_iter()
        .map(|a| jumps.iter().map(|b| crate::dist2(a.point, b.point)).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max)
        .sqrt();
    let d1 = 0.2 * diameter;
    for k in 0..g.len() {
        if mask.cells[k] {
            continue;
        }
        let p = g.center_of(k);
        let (near, dist) = nearest(p);
        let chi = smoothstep_cutoff(dist, d1);
        if chi == 0.0 {
            continue;
        }
        let nrm = near.normal;
        let trace = bilinear(&deep, [near.point[0] - 3.5 * h * nrm[0], near.point[1] - 3.5 * h * nrm[1]]).0;
        let tn = trace[0] * nrm[0] + trace[1] * nrm[1];
        let tau = [trace[0] - tn * nrm[0], trace[1] - tn * nrm[1]];
        let gz = grad_zeta.values[k];
        let gz2 = gz[0] * gz[0] + gz[1] * gz[1];
        let val = if dist <= 2.0 * h || gz2 <= 1e-24 {
            // normal-derivative limit of the quotient at the boundary
            let pn = near.jump / (v.laplacian(near.point) / 2.0);
            [pn * nrm[0] + tau[0], pn * nrm[1] + tau[1]]
        } else {
            let q = (xi.value(p) - ext.field.values[k]) / gz2;
            let gn = gz2.sqrt();
            let e = [gz[0] / gn, gz[1] / gn];
            let te = tau[0] * e[0] + tau[1] * e[1];
            [q * gz[0] + tau[0] - te * e[0], q * gz[1] + tau[1] - te * e[1]]
        };
        psi[k] = [chi * val[0], chi * val[1]];
    }
    let field = VectorField2D { grid: g, values: psi };
    let jac = grid_jacobian(&field);
    let mut map = TransportMap::assemble(field, jac, Closure::Grid);

    let c = mask.centroid();
    let checks = weak_identity(&map, &ext.field, eq, &weak_probes(c, 0.5 * diameter))?;
    let worst = checks.iter().map(|w| w.relative_error).fold(0.0, f64::max);
    map.residual = worst;
    Ok(map)
}

/// `int grad phi . (mu_0 psi 1_Sigma)` against `(1/2 pi) int grad phi . grad xi^Sigma`
/// for each probe; cut cells are weighted by their coverage. The relative
/// error is taken against `(1/2 pi) int |grad phi| |grad xi^Sigma|`.
pub fn weak_identity(
    map: &TransportMap,
    extension: &ScalarField2D,
    eq: &EquilibriumData,
    probes: &[TestFunction],
) -> Result<Vec<WeakDivergence>> {
    let g = eq.grid();
    map.grid().check_same(&g, "weak identity")?;
    extension.grid.check_same(&g, "weak identity")?;
    let area = g.cell_area();
    let region = &eq.sigma;
    let grad_ext = crate::field::gradient(extension);
    let mut out = Vec::new();
    for phi in probes {
        let (mut lhs, mut rhs, mut scale) = (0.0, 0.0, 0.0);
        for k in 0..g.len() {
            let p = g.center_of(k);
            let gp = phi.gradient(p);
            if gp == [0.0, 0.0] {
                continue;
            }
            let (i, j) = g.coords(k);
            let cover = match &region.level {
                Some(l) => l.coverage(i, j),
                None => f64::from(u8::from(region.mask.cells[k])),
            };
            if cover > 0.0 {
                let s = map.psi.values[k];
                lhs += cover * eq.potential.laplacian(p) / (4.0 * PI) * (gp[0] * s[0] + gp[1] * s[1]) * area;
            }
            let ge = grad_ext.values[k];
            rhs += (gp[0] * ge[0] + gp[1] * ge[1]) / (2.0 * PI) * area;
            scale += gp[0].hypot(gp[1]) * ge[0].hypot(ge[1]) / (2.0 * PI) * area;
        }
        out.push(WeakDivergence {
            name: phi.name.clone(),
            lhs,
            rhs,
            relative_error: (lhs - rhs).abs() / scale.max(1e-300),
        });
    }
    Ok(out)
}

/// Predicted normal velocity of the droplet boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoSample {
    pub point: Point,
    pub normal: [f64; 2],
    pub rho: f64,
}

/// `rho = (2 / Delta V) [grad xi^Sigma] . n` on the boundary of `Sigma`.
pub fn boundary_rho(xi: &TestFunction, eq: &EquilibriumData) -> Result<Vec<RhoSample>> {
    let ext = extend(xi, &eq.sigma)?;
    let (jumps, _) = neumann_jump(&ext.field, &eq.sigma)?;
    Ok(jumps
        .into_iter()
        .map(|s| RhoSample { point: s.point, normal: s.normal, rho: 2.0 * s.jump / eq.potential.laplacian(s.point) })
        .collect())
}

/// `phi_t # mu_0`. Each cell receives the mass of its preimage: `mu_0` at
/// `z = phi_t^{-1}(centre)` times the area of the polygon through the
/// preimages of the cell corners and edge midpoints. This is the density
/// `mu_0(z) / det(I + (t/beta) D psi)(z)` up to `O(h^2)`, and neighbouring
/// polygons share their edges, so a constant density is transported without
/// any loss of mass. Cells left in place by the map keep their value.
pub fn pushforward(eq: &EquilibriumData, map: &TransportMap, t: f64, beta: f64) -> Result<Measure2D> {
    if t == 0.0 {
        return Ok(eq.mu0.clone());
    }
    let g = eq.grid();
    map.grid().check_same(&g, "push-forward")?;
    let v = eq.potential.clone();
    let c = t / beta;
    for (k, m) in map.jacobian.iter().enumerate() {
        let d = (1.0 + c * m[0][0]) * (1.0 + c * m[1][1]) - c * c * m[0][1] * m[1][0];
        if d <= 0.0 {
            return Err(Error::Assumption(format!("Jacobian determinant {d} <= 0 at {:?}", g.center_of(k))));
        }
    }
    // preimages on the half-spacing lattice: nodes, edge midpoints, centres
    let (mx, my) = (2 * g.nx + 1, 2 * g.ny + 1);
    let half = 0.5 * g.spacing;
    let pre: Vec<Point> = (0..mx * my)
        .into_par_iter()
        .map(|q| {
            let y = [g.origin[0] + (q % mx) as f64 * half, g.origin[1] + (q / mx) as f64 * half];
            map.inverse(t, beta, y)
        })
        .collect::<Result<_>>()?;
    let at = |a: usize, b: usize| pre[b * mx + a];
    let area = g.cell_area();
    let moved = |i: usize, j: usize| -> Option<(Point, f64)> {
        let (a, b) = (2 * i + 1, 2 * j + 1);
        let ring = [
            at(a - 1, b - 1),
            at(a, b - 1),
            at(a + 1, b - 1),
            at(a + 1, b),
            at(a + 1, b + 1),
            at(a, b + 1),
            at(a - 1, b + 1),
            at(a - 1, b),
        ];
        let y = g.center(i, j);
        let z = at(a, b);
        if z == y && ring.iter().enumerate().all(|(m, p)| {
            let (da, db) = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)][m];
            *p == [y[0] + da as f64 * half, y[1] + db as f64 * half]
        }) {
            return None;
        }
        let mut s = 0.0;
        for m in 0..8 {
            let (p, q) = (ring[m], ring[(m + 1) % 8]);
            s += p[0] * q[1] - q[0] * p[1];
        }
        Some((z, 0.5 * s / area))
    };
    let mu = &eq.mu0;
    let rho0 = |z: Point| v.laplacian(z) / (4.0 * PI);
    match &mu.boundary {
        Some(b) => {
            let nodes: Vec<f64> = (0..=g.ny)
                .flat_map(|j| (0..=g.nx).map(move |i| (i, j)))
                .map(|(i, j)| {
                    let y = g.node(i, j);
                    let z = at(2 * i, 2 * j);
                    if z == y {
                        b.level.nodes[j * (g.nx + 1) + i]
                    } else {
                        b.level.value(z)
                    }
                })
                .collect();
            let level = LevelSet { grid: g, nodes };
            Ok(Measure2D::from_level_set(level, |y| {
                let (i, j) = g.cell_of(y).expect("cell centre");
                match moved(i, j) {
                    None => b.inner_density[g.index(i, j)],
                    Some((z, ratio)) => rho0(z) * ratio,
                }
            }))
        }
        None => {
            let values = (0..g.len())
                .map(|k| {
                    let (i, j) = g.coords(k);
                    match moved(i, j) {
                        None => mu.density.values[k],
                        Some((z, ratio)) if eq.in_sigma(z) => rho0(z) * ratio,
                        Some(_) => 0.0,
                    }
                })
                .collect();
            Measure2D::from_density(ScalarField2D::new(g, values)?)
        }
    }
}

/// Pointwise push-forward density `mu_0(z) / det(I + (t/beta) D psi)(z)`,
/// `z = phi_t^{-1}(y)`, at the cell centres (zero where `z` leaves `Sigma`).
pub fn pushforward_density(eq: &EquilibriumData, map: &TransportMap, t: f64, beta: f64) -> Result<ScalarField2D> {
    let g = eq.grid();
    let values = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let z = map.inverse(t, beta, g.center_of(k))?;
            if !eq.in_sigma(z) {
                return Ok(0.0);
            }
            let d = det(&map.phi_jacobian(t, beta, z));
            if d <= 0.0 {
                return Err(Error::Assumption(format!("Jacobian determinant {d} <= 0 at {z:?}")));
            }
            Ok(eq.potential.laplacian(z) / (4.0 * PI) / d)
        })
        .collect::<Result<Vec<_>>>()?;
    ScalarField2D::new(g, values)
}

/// `sup |f - mu|` over the cells fully inside the support of `mu`, using the
/// uncovered density of cut cells.
pub fn interior_density_distance(f: &ScalarField2D, mu: &Measure2D) -> Result<f64> {
    let g = f.grid;
    g.check_same(&mu.grid(), "density distance")?;
    let mut worst = 0.0f64;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let full = match &mu.boundary {
                Some(c) => c.level.coverage(i, j) == 1.0,
                None => mu.support_mask.get(i, j),
            };
            if full {
                let k = g.index(i, j);
                worst = worst.max((f.values[k] - mu.density.values[k]).abs());
            }
        }
    }
    Ok(worst)
}

/// Approximate equilibrium quantities at time `t`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApproxFamily {
    pub t: f64,
    pub beta: f64,
    pub ttilde_max: f64,
    pub mu_tilde: Measure2D,
    /// `zeta_0 o phi_t^{-1}`
    pub zeta_tilde: ScalarField2D,
    /// `|mass(mu_tilde) - mass(mu_0)|`
    pub mass_error: f64,
}

pub fn approx_family(eq: &EquilibriumData, map: &TransportMap, t: f64, beta: f64) -> Result<ApproxFamily> {
    let ttilde_max = map.t_tilde_max(beta);
    if t.abs() > ttilde_max {
        return Err(Error::InvalidInput(format!("|t| = {} exceeds t~_max = {ttilde_max}", t.abs())));
    }
    let mu_tilde = pushforward(eq, map, t, beta)?;
    let g = eq.grid();
    let zeta = (0..g.len())
        .into_par_iter()
        .map(|k| map.inverse(t, beta, g.center_of(k)).map(|z| eq.zeta_at(z)))
        .collect::<Result<Vec<_>>>()?;
    let mass_error = (mu_tilde.mass() - eq.mu0.mass()).abs();
    Ok(ApproxFamily { t, beta, ttilde_max, mu_tilde, zeta_tilde: ScalarField2D::new(g, zeta)?, mass_error })
}

impl ApproxFamily {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let w = |name: &str, f: &ScalarField2D| -> Result<()> {
            let file = std::fs::File::create(dir.join(name))?;
            crate::field::io::write_binary(f, std::io::BufWriter::new(file))
        };
        w("mu_tilde.bin", &self.mu_tilde.density)?;
        w("zeta_tilde.bin", &self.zeta_tilde)?;
        let manifest = serde_json::json!({
            "t": self.t,
            "beta": self.beta,
            "ttilde_max": self.ttilde_max,
            "mass": self.mu_tilde.mass(),
            "mass_error": self.mass_error,
        });
        std::fs::write(dir.join("approx.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Largest density difference over cells that are fully inside both supports.
pub fn interior_sup_distance(a: &Measure2D, b: &Measure2D) -> Result<f64> {
    let g = a.grid();
    g.check_same(&b.grid(), "measure distance")?;
    let full = |m: &Measure2D, i: usize, j: usize| match &m.boundary {
        Some(c) => c.level.coverage(i, j) == 1.0,
        None => m.support_mask.get(i, j),
    };
    let mut worst = 0.0f64;
    for j in 0..g.ny {
        for i in 0..g.nx {
            if full(a, i, j) && full(b, i, j) {
                let k = g.index(i, j);
                worst = worst.max((a.density.values[k] - b.density.values[k]).abs());
            }
        }
    }
    Ok(worst)
}

/// Uniform measure on a disk: the equilibrium measure of `V = a|x - c|^2`
/// with radius `1/sqrt(a)`, with closed-form potential and polar quadrature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformDisk {
    pub center: Point,
    pub radius: f64,
    /// Gauss-Legendre nodes per ray.
    pub radial_nodes: usize,
    /// Equispaced ray directions.
    pub angular_nodes: usize,
    /// Circle across which integrands lose smoothness (the support of
    /// `psi`); rays are split where they cross it.
    pub breaks: Option<(Point, f64)>,
}

impl UniformDisk {
    pub fn new(center: Point, radius: f64) -> Self {
        Self { center, radius, radial_nodes: 48, angular_nodes: 128, breaks: None }
    }

    pub fn circular_law() -> Self {
        Self::new([0.0, 0.0], 1.0)
    }

    pub fn with_nodes(mut self, radial: usize, angular: usize) -> Self {
        self.radial_nodes = radial;
        self.angular_nodes = angular;
        self
    }

    pub fn with_break(mut self, center: Point, radius: f64) -> Self {
        self.breaks = Some((center, radius));
        self
    }

    pub fn density(&self) -> f64 {
        1.0 / (PI * self.radius * self.radius)
    }

    pub fn contains(&self, p: Point) -> bool {
        crate::dist2(p, self.center) <= self.radius * self.radius
    }

    pub fn h(&self, p: Point) -> f64 {
        let r2 = crate::dist2(p, self.center);
        let r0 = self.radius;
        if r2 <= r0 * r0 {
            -r0.ln() + 0.5 * (1.0 - r2 / (r0 * r0))
        } else {
            -0.5 * r2.ln()
        }
    }

    pub fn grad_h(&self, p: Point) -> [f64; 2] {
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        let r2 = d[0] * d[0] + d[1] * d[1];
        let s = if r2 <= self.radius * self.radius { 1.0 / (self.radius * self.radius) } else { 1.0 / r2 };
        [-d[0] * s, -d[1] * s]
    }

    /// `int int -log|x - y| dmu dmu`
    pub fn self_energy(&self) -> f64 {
        0.25 - self.radius.ln()
    }

    /// `int f dmu`, exact in the limit for integrands with a
    /// direction-dependent limit at `a`. For `a` in the closed disk the disk
    /// is a fan of segments from `a` to the boundary point at angle `phi`,
    /// `b = a + l (c(phi) - a)`, with area element `l |(c - a) x c'| dl dphi`:
    /// smooth and periodic in `phi` however close `a` is to the circle (rays
    /// parametrized by their own angle are not). For `a` outside the
    /// integrand is smooth and plain polar coordinates about the centre are
    /// used.
    pub fn integrate_around(&self, a: Point, f: &dyn Fn(Point) -> f64) -> f64 {
        let (xs, ws) = gauss_legendre(self.radial_nodes);
        let m = self.angular_nodes;
        let r0 = self.radius;
        let inside = crate::dist2(a, self.center) <= r0 * r0;
        let mut total = 0.0;
        for k in 0..m {
            let th = 2.0 * PI * (k as f64 + 0.5) / m as f64;
            let e = [th.cos(), th.sin()];
            let c = [self.center[0] + r0 * e[0], self.center[1] + r0 * e[1]];
            // segment start, direction, length and the area-element factor
            let (start, v, weight) = if inside {
                let v = [c[0] - a[0], c[1] - a[1]];
                // (c - a) x c'(phi), c' = r0 (-sin, cos)
                (a, v, v[0] * r0 * e[0] + v[1] * r0 * e[1])
            } else {
                (self.center, [r0 * e[0], r0 * e[1]], r0 * r0)
            };
            let len = v[0].hypot(v[1]);
            if len == 0.0 || weight <= 0.0 {
                continue;
            }
            let u = [v[0] / len, v[1] / len];
            let mut cuts = vec![0.0, 1.0];
            if let Some((bc, br)) = self.breaks {
                let q = [start[0] - bc[0], start[1] - bc[1]];
                let bb = u[0] * q[0] + u[1] * q[1];
                let dd = bb * bb - (q[0] * q[0] + q[1] * q[1] - br * br);
                if dd > 0.0 {
                    for x in [-bb - dd.sqrt(), -bb + dd.sqrt()] {
                        let l = x / len;
                        if l > 0.0 && l < 1.0 {
                            cuts.push(l);
                        }
                    }
                }
            }
            cuts.sort_by(f64::total_cmp);
            for w in cuts.windows(2) {
                let (mid, half) = (0.5 * (w[1] + w[0]), 0.5 * (w[1] - w[0]));
                let mut s = 0.0;
                for (x, wt) in xs.iter().zip(&ws) {
                    let l = mid + half * x;
                    s += wt * l * f([start[0] + l * v[0], start[1] + l * v[1]]);
                }
                total += s * half * weight;
            }
        }
        total * 2.0 * PI / m as f64 * self.density()
    }

    pub fn integrate(&self, f: &dyn Fn(Point) -> f64) -> f64 {
        self.integrate_around(self.center, f)
    }
}

/// The background measure with a potential that can be evaluated anywhere.
#[derive(Clone, Debug)]
pub enum Reference {
    Disk(UniformDisk),
    Grid(Background),
}

impl Reference {
    pub fn h(&self, p: Point) -> f64 {
        match self {
            Reference::Disk(d) => d.h(p),
            Reference::Grid(b) => b.h.sample(p),
        }
    }

    pub fn grad_h(&self, p: Point) -> [f64; 2] {
        match self {
            Reference::Disk(d) => d.grad_h(p),
            Reference::Grid(b) => {
                let e = b.grid().spacing;
                [
                    (b.h.sample([p[0] + e, p[1]]) - b.h.sample([p[0] - e, p[1]])) / (2.0 * e),
                    (b.h.sample([p[0], p[1] + e]) - b.h.sample([p[0], p[1] - e])) / (2.0 * e),
                ]
            }
        }
    }

    pub fn integrate(&self, f: &(dyn Fn(Point) -> f64 + Sync)) -> f64 {
        match self {
            Reference::Disk(d) => d.integrate(f),
            Reference::Grid(b) => b.mu.integrate(f),
        }
    }
}

/// `grad H_{N, eta}(y)`: each point charge smeared on the circle of radius
/// `eta_i`, so its field vanishes inside that circle.
pub fn truncated_gradient(x: &Configuration, eta: &TruncationVector, reference: &Reference, y: Point) -> [f64; 2] {
    let n = x.n() as f64;
    let gh = reference.grad_h(y);
    let mut g = [-n * gh[0], -n * gh[1]];
    for (p, e) in x.points.iter().zip(&eta.eta) {
        let d = [y[0] - p[0], y[1] - p[1]];
        let r2 = d[0] * d[0] + d[1] * d[1];
        if r2 > e * e {
            g[0] -= d[0] / r2;
            g[1] -= d[1] / r2;
        }
    }
    g
}

/// `A_s = (1/2 pi) int_{U_N} <grad H, (2 D psi - div psi Id) grad H>`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnisotropyResult {
    pub value: f64,
    pub s: f64,
    /// Cells where the anisotropy matrix is non-zero.
    pub region: Mask,
    /// `int_{U_N} |grad H|^2` over the same cells.
    pub field_energy: f64,
    /// Largest `|trace|` of the matrix over the grid.
    pub max_trace: f64,
}

fn check_s(s: f64) -> Result<()> {
    if !(s > 0.0 && s < 0.5) {
        return Err(Error::InvalidInput(format!("truncation parameter s = {s} outside (0, 1/2)")));
    }
    Ok(())
}

fn anisotropy_sum(psi: &VectorField2D, grad: &(dyn Fn(usize) -> [f64; 2] + Sync), s: f64) -> AnisotropyResult {
    let g = psi.grid;
    let jac = grid_jacobian(psi);
    let mats: Vec<Mat> = jac.iter().map(anisotropy_matrix).collect();
    let region = Mask { grid: g, cells: mats.iter().map(|m| m.iter().flatten().any(|x| *x != 0.0)).collect() };
    let area = g.cell_area();
    let (value, energy) = (0..g.len())
        .into_par_iter()
        .filter(|&k| region.cells[k])
        .map(|k| {
            let e = grad(k);
            let a = mat_vec(&mats[k], e);
            ((e[0] * a[0] + e[1] * a[1]) * area, (e[0] * e[0] + e[1] * e[1]) * area)
        })
        .collect::<Vec<_>>()
        .iter()
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let max_trace = mats.iter().map(|m| (m[0][0] + m[1][1]).abs()).fold(0.0, f64::max);
    AnisotropyResult { value: value / (2.0 * PI), s, region, field_energy: energy, max_trace }
}

/// `A_s` on the background grid: `H_{N, s r}` from `truncated_potential_field`
/// with nearest-neighbour radii, gradients and `D psi` by grid differences.
pub fn anisotropy(psi: &VectorField2D, x: &Configuration, bg: &Background, s: f64) -> Result<AnisotropyResult> {
    check_s(s)?;
    psi.grid.check_same(&bg.grid(), "anisotropy")?;
    let eta = nn_truncation(x)?.scaled(s);
    let hf = truncated_potential_field(x, bg, &eta)?;
    let grad = crate::field::gradient(&hf);
    Ok(anisotropy_sum(psi, &|k| grad.values[k], s))
}

/// `A_s` on a local grid resolving the truncation radii: `grad H` exact at
/// the cell centres, `D psi` by grid differences of `psi` sampled there.
pub fn anisotropy_local(
    map: &TransportMap,
    x: &Configuration,
    reference: &Reference,
    s: f64,
    cells_per_eta: f64,
) -> Result<AnisotropyResult> {
    check_s(s)?;
    let eta = nn_truncation(x)?.scaled(s);
    let grid = local_grid(map, eta.eta.iter().cloned().fold(f64::INFINITY, f64::min) / cells_per_eta)?;
    let psi = VectorField2D::from_fn(grid, |p| map.psi_at(p));
    Ok(anisotropy_sum(&psi, &|k| truncated_gradient(x, &eta, reference, grid.center_of(k)), s))
}

/// Square grid covering the support of `psi` with a two-cell margin, spacing
/// at most `spacing` and at most 4096 cells per side.
fn local_grid(map: &TransportMap, spacing: f64) -> Result<Grid2D> {
    let g = map.grid();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for k in 0..g.len() {
        if map.support.cells[k] {
            let p = g.center_of(k);
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
    }
    if lo[0] > hi[0] {
        return Err(Error::EmptySupport);
    }
    let half = 0.5 * (hi[0] - lo[0]).max(hi[1] - lo[1]) + 2.0 * g.spacing;
    let n = ((2.0 * half / spacing).ceil() as usize).clamp(16, 4096);
    Ok(Grid2D::centered_at([0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])], half, n))
}

/// `A_s` without a grid, through the stress-tensor identity
/// `(1/2 pi) int <grad H, A grad H> = int int K df df` with
/// `K(a, b) = -(a - b).(psi(a) - psi(b)) / |a - b|^2` and
/// `f = sum_i sigma_i - N mu`, `sigma_i` the uniform measure on the circle of
/// radius `s r(x_i)`. Circles use `circle_nodes` equispaced nodes.
pub fn anisotropy_exact(
    psi: &(dyn Fn(Point) -> [f64; 2] + Sync),
    dpsi: &(dyn Fn(Point) -> Mat + Sync),
    x: &Configuration,
    disk: &UniformDisk,
    s: f64,
    circle_nodes: usize,
) -> Result<f64> {
    check_s(s)?;
    let eta = nn_truncation(x)?.scaled(s);
    let n = x.n();
    let m = circle_nodes.max(8);
    let circles: Vec<Vec<(Point, [f64; 2], [f64; 2])>> = x
        .points
        .iter()
        .zip(&eta.eta)
        .map(|(&c, &r)| {
            (0..m)
                .map(|q| {
                    let th = 2.0 * PI * q as f64 / m as f64;
                    let a = [c[0] + r * th.cos(), c[1] + r * th.sin()];
                    (a, psi(a), [-th.sin(), th.cos()])
                })
                .collect()
        })
        .collect();
    let k = |a: Point, pa: [f64; 2], b: Point, pb: [f64; 2]| -> f64 {
        let d = [a[0] - b[0], a[1] - b[1]];
        -(d[0] * (pa[0] - pb[0]) + d[1] * (pa[1] - pb[1])) / (d[0] * d[0] + d[1] * d[1])
    };
    let w = 1.0 / (m * m) as f64;
    let pairs: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                for (p, &(a, pa, ta)) in circles[i].iter().enumerate() {
                    for (q, &(b, pb, _)) in circles[j].iter().enumerate() {
                        acc += if i == j && p == q {
                            // chord direction tends to the tangent
                            let d = dpsi(a);
                            let v = mat_vec(&d, ta);
                            -(ta[0] * v[0] + ta[1] * v[1])
                        } else {
                            k(a, pa, b, pb)
                        };
                    }
                }
            }
            acc * w
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    let cross: f64 = circles
        .par_iter()
        .map(|c| {
            c.iter().map(|&(a, pa, _)| disk.integrate_around(a, &|b| if b == a { 0.0 } else { k(a, pa, b, psi(b)) })).sum::<f64>()
                / m as f64
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    let nf = n as f64;
    let background = 2.0 * nf * nf * disk.integrate(&|a| {
        let p = psi(a);
        let g = disk.grad_h(a);
        p[0] * g[0] + p[1] * g[1]
    });
    Ok(pairs - 2.0 * nf * cross + background)
}

/// `E = (D Phi grad H) o Phi^{-1} / det D Phi o Phi^{-1}` at the cell centres
/// of `grid`, with `Phi = phi_t`. Cells left in place get `grad H` unchanged.
pub fn transported_field(
    grad: &(dyn Fn(Point) -> [f64; 2] + Sync),
    map: &TransportMap,
    t: f64,
    beta: f64,
    grid: Grid2D,
) -> Result<VectorField2D> {
    let values = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let y = grid.center_of(k);
            let z = map.inverse(t, beta, y)?;
            if z == y && map.jacobian_at(z).iter().flatten().all(|v| *v == 0.0) {
                return Ok(grad(y));
            }
            let j = map.phi_jacobian(t, beta, z);
            let d = det(&j);
            if d <= 0.0 {
                return Err(Error::Assumption(format!("transport not invertible at {z:?}")));
            }
            let e = mat_vec(&j, grad(z));
            Ok([e[0] / d, e[1] / d])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VectorField2D { grid, values })
}

/// One test field of the weak divergence check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakDivergence {
    pub name: String,
    /// `int grad phi . E`
    pub lhs: f64,
    /// `2 pi (sum_i <sigma_i, phi o Phi> - N int phi o Phi dmu)`
    pub rhs: f64,
    pub relative_error: f64,
}

/// Weak form of `div E = -2 pi (sum Phi # sigma_i - N Phi # mu)` for the
/// transported truncated field, on `grid`, against the given test fields.
#[allow(clippy::too_many_arguments)]
pub fn transported_divergence_check(
    x: &Configuration,
    eta: &TruncationVector,
    reference: &Reference,
    map: &TransportMap,
    t: f64,
    beta: f64,
    grid: Grid2D,
    probes: &[TestFunction],
) -> Result<Vec<WeakDivergence>> {
    let e = transported_field(&|p| truncated_gradient(x, eta, reference, p), map, t, beta, grid)?;
    let area = grid.cell_area();
    let n = x.n() as f64;
    let mut out = Vec::new();
    for phi in probes {
        let lhs: f64 = (0..grid.len())
            .into_par_iter()
            .map(|k| {
                let gp = phi.gradient(grid.center_of(k));
                let v = e.values[k];
                (gp[0] * v[0] + gp[1] * v[1]) * area
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        let moved = |p: Point| phi.value(map.phi(t, beta, p));
        let circles: f64 = x.points.iter().zip(&eta.eta).map(|(&p, &r)| circle_mean(&moved, p, r)).sum();
        let background = reference.integrate(&moved);
        let rhs = 2.0 * PI * (circles - n * background);
        out.push(WeakDivergence {
            name: phi.name.clone(),
            lhs,
            rhs,
            relative_error: (lhs - rhs).abs() / rhs.abs().max(1e-300),
        });
    }
    Ok(out)
}

fn circle_mean(f: &dyn Fn(Point) -> f64, c: Point, r: f64) -> f64 {
    let m = 64;
    (0..m)
        .map(|a| {
            let th = 2.0 * PI * a as f64 / m as f64;
            f([c[0] + r * th.cos(), c[1] + r * th.sin()])
        })
        .sum::<f64>()
        / m as f64
}

/// Exact pieces of `F_N(Phi(X), Phi # mu) - F_N(X, mu)` for a uniform disk,
/// written with the bounded kernel `-log(|Phi a - Phi b| / |a - b|)`.
fn transported_energy_change(x: &[Point], disk: &UniformDisk, phi: &(dyn Fn(Point) -> Point + Sync)) -> [f64; 3] {
    let n = x.len() as f64;
    let kernel = |a: Point, pa: Point, b: Point| -> f64 {
        let pb = phi(b);
        let num = crate::dist2(pa, pb);
        let den = crate::dist2(a, b);
        if den == 0.0 {
            0.0
        } else {
            -0.5 * (num / den).ln()
        }
    };
    let px: Vec<Point> = x.iter().map(|&p| phi(p)).collect();
    let mut pair = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                pair += -0.5 * (crate::dist2(px[i], px[j]) / crate::dist2(x[i], x[j])).ln();
            }
        }
    }
    let cross: f64 =
        x.par_iter().zip(&px).map(|(&a, &pa)| disk.integrate_around(a, &|b| kernel(a, pa, b))).collect::<Vec<f64>>().iter().sum();
    // outer integral on a polar grid about the centre; the inner integral is
    // centred at each outer node
    let background = n * n * disk.integrate(&|a| {
        let pa = phi(a);
        disk.integrate_around(a, &|b| kernel(a, pa, b))
    });
    [pair, -2.0 * n * cross, background]
}

/// Derivative at `t = 0` of `F_N(phi_t(X), phi_t # mu)` times `beta`, for a
/// uniform disk: pair, cross and background parts.
pub fn first_variation(x: &Configuration, disk: &UniformDisk, psi: &(dyn Fn(Point) -> [f64; 2] + Sync)) -> [f64; 3] {
    let p = &x.points;
    let n = p.len() as f64;
    let ps: Vec<[f64; 2]> = p.iter().map(|&a| psi(a)).collect();
    let mut pair = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if i != j {
                let d = [p[i][0] - p[j][0], p[i][1] - p[j][1]];
                let e = [ps[i][0] - ps[j][0], ps[i][1] - ps[j][1]];
                pair -= (d[0] * e[0] + d[1] * e[1]) / (d[0] * d[0] + d[1] * d[1]);
            }
        }
    }
    let cross: f64 = p
        .par_iter()
        .zip(&ps)
        .map(|(&a, &pa)| {
            disk.integrate_around(a, &|b| {
                let d = [a[0] - b[0], a[1] - b[1]];
                let r2 = d[0] * d[0] + d[1] * d[1];
                if r2 == 0.0 {
                    return 0.0;
                }
                let pb = psi(b);
                -(d[0] * (pa[0] - pb[0]) + d[1] * (pa[1] - pb[1])) / r2
            })
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    let background = 2.0 * n * n * disk.integrate(&|a| {
        let s = psi(a);
        let g = disk.grad_h(a);
        s[0] * g[0] + s[1] * g[1]
    });
    [pair, -2.0 * n * cross, background]
}

/// Energy change and comparison terms at one value of `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportEnergyPoint {
    pub t: f64,
    /// `F_N(Phi_t(X), mu~_t) - F_N(X, mu_0)` by polar quadrature.
    pub lhs: f64,
    /// `(t/beta)(A_s + (1/2) sum_{i in I} div psi(x_i))`
    pub rhs: f64,
    pub residual: f64,
    /// `lhs - (t/beta)(A_0 + (1/2) sum div psi)`, with `A_0` the `s -> 0`
    /// extrapolation of `A_s`.
    pub residual_limit: f64,
    /// `lhs - (t/beta) dF`, with `dF` the exact first variation.
    pub residual_linear: f64,
    /// `|residual|` over the error budget with unit constants.
    pub budget_ratio: f64,
}

/// `A_s + (1/2) sum div psi` against the exact first variation at one `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub s: f64,
    pub anisotropy: f64,
    pub comparison: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportEnergyReport {
    pub n: usize,
    pub beta: f64,
    pub s: f64,
    /// `beta d/dt F_N` at `t = 0`.
    pub first_variation: f64,
    /// `A_s` from the stress-tensor identity.
    pub anisotropy: f64,
    /// Richardson extrapolation `(4 A_{s/2} - A_s) / 3`. The gap to the first
    /// variation is `O(s^2)`, so this removes the `s^2 t` part of the error.
    pub anisotropy_limit: f64,
    /// `A_s` on a local grid, when requested.
    pub anisotropy_grid: Option<f64>,
    pub div_sum: f64,
    /// `int_{U_N} |grad H_{N, s r}|^2` on the local grid (NaN when skipped).
    pub field_energy: f64,
    pub indices_in_u: usize,
    pub indices_near_boundary: usize,
    pub points: Vec<TransportEnergyPoint>,
    /// Least-squares slope of `log|residual|` against `log t`. At fixed
    /// `s > 0` the residual keeps a part linear in `t`.
    pub order: f64,
    pub order_limit: f64,
    pub order_linear: f64,
    pub sweep: Vec<SweepPoint>,
}

fn fitted_order(ts: &[f64], r: &[f64]) -> f64 {
    let xs: Vec<f64> = ts.iter().map(|t| t.abs().ln()).collect();
    let ys: Vec<f64> = r.iter().map(|v| v.abs().max(1e-300).ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        f64::NAN
    } else {
        sxy / sxx
    }
}

/// Options for [`energy_transport_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportCheckOptions {
    pub beta: f64,
    pub ts: Vec<f64>,
    pub s: f64,
    pub sweep: Vec<f64>,
    /// Local grid cells per smallest truncation radius; zero skips the grid
    /// evaluation of `A_s`.
    pub cells_per_eta: f64,
    pub circle_nodes: usize,
}

impl Default for TransportCheckOptions {
    fn default() -> Self {
        Self { beta: 2.0, ts: vec![1e-2, 5e-3, 2.5e-3], s: 0.25, sweep: vec![0.4, 0.25, 0.1], cells_per_eta: 4.0, circle_nodes: 32 }
    }
}

/// Compares `F_N(Phi_t(X), mu~_t) - F_N(X, mu_0)` with
/// `(t/beta) A_s + (t/2 beta) sum_{i in I} div psi(x_i)` for a uniform disk
/// background, at each `t` of the options.
pub fn energy_transport_check(
    x: &Configuration,
    disk: &UniformDisk,
    map: &TransportMap,
    opts: &TransportCheckOptions,
) -> Result<TransportEnergyReport> {
    check_s(opts.s)?;
    let beta = opts.beta;
    let n = x.n();
    let tmax = opts.ts.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    if tmax / beta * map.c01_norm > 0.5 {
        return Err(Error::InvalidInput(format!("t ||psi||_C01 / beta = {} exceeds 1/2", tmax / beta * map.c01_norm)));
    }
    let reference = Reference::Disk(*disk);
    let psi = |p: Point| map.psi_at(p);
    let dv = first_variation(x, disk, &psi);
    let df: f64 = dv.iter().sum();

    // indices in U_N: within N^{-1/2} of the support of psi
    let g = map.grid();
    let reach = 1.0 / (n as f64).sqrt() + g.spacing;
    let supp: Vec<Point> = (0..g.len()).filter(|&k| map.support.cells[k]).map(|k| g.center_of(k)).collect();
    let near = |p: Point, r: f64| supp.iter().any(|q| crate::dist2(*q, p) <= r * r);
    let in_u: Vec<usize> = (0..n).filter(|&i| near(x.points[i], reach)).collect();
    let near_boundary = in_u
        .iter()
        .filter(|&&i| {
            let r = crate::norm([x.points[i][0] - disk.center[0], x.points[i][1] - disk.center[1]]);
            (r - disk.radius).abs() <= 1.0 / (n as f64).sqrt()
        })
        .count();
    let div_sum: f64 = in_u.iter().map(|&i| map.div_at(x.points[i])).sum();

    let mut sweep = Vec::new();
    let mut svals = opts.sweep.clone();
    if !svals.contains(&opts.s) {
        svals.push(opts.s);
    }
    let dpsi = |p: Point| map.jacobian_at(p);
    let mut main = None;
    for &s in &svals {
        let a = anisotropy_exact(&psi, &dpsi, x, disk, s, opts.circle_nodes)?;
        let comparison = a + 0.5 * div_sum;
        if s == opts.s {
            main = Some(a);
        }
        if opts.sweep.contains(&s) {
            sweep.push(SweepPoint { s, anisotropy: a, comparison, gap: df - comparison });
        }
    }
    let a_value = main.expect("main s evaluated");
    let a_half = anisotropy_exact(&psi, &dpsi, x, disk, 0.5 * opts.s, opts.circle_nodes)?;
    let a_limit = (4.0 * a_half - a_value) / 3.0;
    let grid = if opts.cells_per_eta > 0.0 { Some(anisotropy_local(map, x, &reference, opts.s, opts.cells_per_eta)?) } else { None };
    let field_energy = grid.as_ref().map_or(f64::NAN, |g| g.field_energy);
    let c01 = map.c01_norm;
    let c11 = map.c11_norm;
    let ni = in_u.len() as f64;
    let mut points = Vec::new();
    for &t in &opts.ts {
        let c = t / beta;
        let parts = transported_energy_change(&x.points, disk, &|p| map.phi(t, beta, p));
        let lhs: f64 = parts.iter().sum();
        let rhs = c * (a_value + 0.5 * div_sum);
        let budget = c * c * c01 * c01 * field_energy
            + opts.s * opts.s * c * c01 * (ni + field_energy)
            + ni * opts.s * c / (n as f64).sqrt() * c11
            + near_boundary as f64 * c * c01;
        points.push(TransportEnergyPoint {
            t,
            lhs,
            rhs,
            residual: lhs - rhs,
            residual_limit: lhs - c * (a_limit + 0.5 * div_sum),
            residual_linear: lhs - c * df,
            budget_ratio: (lhs - rhs).abs() / budget.max(1e-300),
        });
    }
    let ts: Vec<f64> = points.iter().map(|p| p.t).collect();
    let order = fitted_order(&ts, &points.iter().map(|p| p.residual).collect::<Vec<_>>());
    let order_limit = fitted_order(&ts, &points.iter().map(|p| p.residual_limit).collect::<Vec<_>>());
    let order_linear = fitted_order(&ts, &points.iter().map(|p| p.residual_linear).collect::<Vec<_>>());
    Ok(TransportEnergyReport {
        n,
        beta,
        s: opts.s,
        first_variation: df,
        anisotropy: a_value,
        anisotropy_limit: a_limit,
        anisotropy_grid: grid.map(|g| g.value),
        div_sum,
        field_energy,
        indices_in_u: in_u.len(),
        indices_near_boundary: near_boundary,
        points,
        order,
        order_limit,
        order_linear,
        sweep,
    })
}

/// `sup |zeta~_t - zeta_t|` over the annulus `r_in <= |x - c| <= r_out`.
pub fn zeta_annulus_distance(zeta_tilde: &ScalarField2D, zeta_t: &ScalarField2D, center: Point, r_in: f64, r_out: f64) -> Result<f64> {
    let g = zeta_tilde.grid;
    g.check_same(&zeta_t.grid, "zeta distance")?;
    Ok((0..g.len())
        .filter(|&k| {
            let r = crate::dist2(g.center_of(k), center).sqrt();
            r >= r_in && r <= r_out
        })
        .map(|k| (zeta_tilde.values[k] - zeta_t.values[k]).abs())
        .fold(0.0, f64::max))
}

//! Hamiltonian, next-order energy and the truncated electric potential.
//!
//! Sums over pairs run over ordered pairs `i != j`, so each physical pair is
//! counted twice.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::EquilibriumData;
use crate::field::harmonic::FarField;
use crate::field::logpot::{potential_at, self_energy, LogConvolver};
use crate::field::{Grid2D, Measure2D, ScalarField2D};
use crate::potential::Potential;
use crate::test_function::TestFunction;
use crate::{Error, Point, Result};

/// An `N`-point configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub points: Vec<Point>,
}

impl Configuration {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    /// Errors on the first pair of coincident points.
    pub fn check_distinct(&self) -> Result<()> {
        for i in 0..self.n() {
            for j in i + 1..self.n() {
                if self.points[i] == self.points[j] {
                    return Err(Error::CoincidentPoints(i, j));
                }
            }
        }
        Ok(())
    }

    pub fn translated(&self, d: Point) -> Self {
        Self { points: self.points.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect() }
    }

    pub fn min_distance(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.n() {
            for j in i + 1..self.n() {
                m = m.min(crate::dist2(self.points[i], self.points[j]));
            }
        }
        m.sqrt()
    }
}

/// Points in lexicographic order. Sums over points run in this order, which
/// makes every energy exactly invariant under relabelling.
fn canonical(p: &[Point]) -> Vec<Point> {
    let mut q = p.to_vec();
    q.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    q
}

/// `sum_{i != j} -log|x_i - x_j|`, reference order.
pub fn pair_energy(x: &Configuration) -> Result<f64> {
    x.check_distinct()?;
    let p = canonical(&x.points);
    let mut s = 0.0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            s -= crate::dist2(p[i], p[j]).ln();
        }
    }
    // -ln(d^2) = 2 (-log d) accounts for both orders of the pair
    Ok(s)
}

fn confinement_sum(p: &[Point], v: &dyn Potential) -> f64 {
    canonical(p).iter().map(|&q| v.value(q)).sum()
}

/// `H_N = sum_{i != j} -log|x_i - x_j| + N sum V(x_i)` by the direct double loop.
pub fn hamiltonian(x: &Configuration, v: &dyn Potential) -> Result<f64> {
    let n = x.n() as f64;
    Ok(pair_energy(x)? + n * confinement_sum(&x.points, v))
}

/// Same as [`hamiltonian`] with rows summed in parallel; row sums are
/// combined in index order.
pub fn hamiltonian_parallel(x: &Configuration, v: &dyn Potential) -> Result<f64> {
    x.check_distinct()?;
    let p = canonical(&x.points);
    let rows: Vec<f64> = (0..p.len())
        .into_par_iter()
        .map(|i| (i + 1..p.len()).map(|j| -crate::dist2(p[i], p[j]).ln()).sum())
        .collect();
    let n = x.n() as f64;
    Ok(rows.iter().sum::<f64>() + n * confinement_sum(&p, v))
}

/// Per-point truncation radii `eta_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationVector {
    pub eta: Vec<f64>,
}

impl TruncationVector {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidInput("truncation radii must be positive".into()));
        }
        Ok(Self { eta })
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { eta: self.eta.iter().map(|e| e * s).collect() }
    }
}

/// `r(x_i) = min(min_{j != i} |x_i - x_j|, N^{-1/2}) / 4`.
pub fn nn_truncation(x: &Configuration) -> Result<TruncationVector> {
    let n = x.n();
    if n < 2 {
        return Err(Error::InvalidInput("nearest-neighbour truncation needs N >= 2".into()));
    }
    let cap = 1.0 / (n as f64).sqrt();
    let p = &x.points;
    let eta = (0..n)
        .map(|i| {
            let nn = (0..n).filter(|&j| j != i).map(|j| crate::dist2(p[i], p[j])).fold(f64::INFINITY, f64::min).sqrt();
            0.25 * nn.min(cap)
        })
        .collect();
    TruncationVector::new(eta)
}

/// A background measure with its potential on its own grid and its
/// self-energy, reused across many configurations.
#[derive(Clone, Debug)]
pub struct Background {
    pub mu: Measure2D,
    /// `h^mu` at the cell centres.
    pub h: ScalarField2D,
    /// `int int -log|x - y| dmu dmu`.
    pub self_energy: f64,
}

impl Background {
    pub fn new(mu: Measure2D) -> Self {
        let h = LogConvolver::new(mu.grid()).apply(&mu.density).expect("same grid");
        let self_energy = self_energy(&mu, &h);
        Self { mu, h, self_energy }
    }

    pub fn from_equilibrium(eq: &EquilibriumData) -> Self {
        Self { mu: eq.mu0.clone(), h: eq.h_mu.clone(), self_energy: self_energy(&eq.mu0, &eq.h_mu) }
    }

    pub fn grid(&self) -> Grid2D {
        self.mu.grid()
    }

    pub fn mass(&self) -> f64 {
        self.mu.mass()
    }

    /// `h^mu(x)` by direct summation of exact cell integrals.
    pub fn potential_at(&self, x: Point) -> f64 {
        potential_at(&self.mu, x)
    }

    /// Pointwise density at `x` (the uncovered value in cut cells).
    pub fn density_at(&self, x: Point) -> f64 {
        let g = self.grid();
        match g.cell_of(x) {
            None => 0.0,
            Some((i, j)) => match &self.mu.boundary {
                Some(b) => {
                    if b.level.value(x) <= 0.0 {
                        b.inner_density[g.index(i, j)]
                    } else {
                        0.0
                    }
                }
                None => self.mu.density.at(i, j),
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    #[serde(rename = "FN")]
    pub fn_value: f64,
    /// `sum_{i != j} -log|x_i - x_j|`
    pub pairwise_sum: f64,
    /// `-2N sum h^mu(x_i)`
    pub cross_term: f64,
    /// `N^2 int int -log|x - y| dmu dmu`
    pub background_term: f64,
    pub identity_residuals: BTreeMap<String, f64>,
}

/// `F_N(X, mu)`: the energy of `sum delta_{x_i} - N mu` with the diagonal
/// removed, split into its pair, cross and background terms.
pub fn next_order_energy(x: &Configuration, bg: &Background) -> Result<EnergyReport> {
    let n = x.n() as f64;
    let pair = pair_energy(x)?;
    let hs: f64 = canonical(&x.points).par_iter().map(|&p| bg.potential_at(p)).collect::<Vec<_>>().iter().sum();
    let cross = -2.0 * n * hs;
    let background = n * n * bg.self_energy;
    Ok(EnergyReport {
        fn_value: pair + cross + background,
        pairwise_sum: pair,
        cross_term: cross,
        background_term: background,
        identity_residuals: BTreeMap::new(),
    })
}

/// `|H_N - (N^2 I_V + 2N sum zeta_0(x_i) + F_N)|`, with `zeta_0` interpolated
/// from its grid values.
pub fn splitting_residual(x: &Configuration, eq: &EquilibriumData, bg: &Background) -> Result<f64> {
    let n = x.n() as f64;
    let h = hamiltonian(x, eq.potential.as_ref())?;
    let f = next_order_energy(x, bg)?.fn_value;
    let z: f64 = x.points.iter().map(|&p| eq.zeta_at(p)).sum();
    Ok((h - (n * n * eq.iv + 2.0 * n * z + f)).abs())
}

/// `H_{N,eta}(y) = sum_i -log max(|y - x_i|, eta_i) - N h^mu(y)` at the cell
/// centres of the background grid.
pub fn truncated_potential_field(x: &Configuration, bg: &Background, eta: &TruncationVector) -> Result<ScalarField2D> {
    if eta.eta.len() != x.n() {
        return Err(Error::InvalidInput("one truncation radius per point required".into()));
    }
    let g = bg.grid();
    let n = x.n() as f64;
    let values = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let y = g.center_of(k);
            let s: f64 = x
                .points
                .iter()
                .zip(&eta.eta)
                .map(|(&p, &e)| -crate::dist2(y, p).sqrt().max(e).ln())
                .sum();
            s - n * bg.h.values[k]
        })
        .collect();
    ScalarField2D::new(g, values)
}

/// Electric energy of a field on the whole plane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldEnergy {
    /// Grid part inside the largest circle in the box.
    pub grid: f64,
    /// Multipole estimate beyond that circle.
    pub tail: f64,
}

impl FieldEnergy {
    pub fn total(&self) -> f64 {
        self.grid + self.tail
    }
}

/// `int |grad H|^2` by edge differences inside the circle of radius 0.95 times
/// the box inscribed radius, plus the multipole tail of the exterior field.
/// Requires all charges well inside that circle.
pub fn field_energy(hf: &ScalarField2D) -> FieldEnergy {
    let g = hf.grid;
    let c = g.box_center();
    let u = g.upper();
    let r_box = (c[0] - g.origin[0]).min(u[0] - c[0]);
    let cut = 0.95 * r_box;
    let h = g.spacing;
    let v = &hf.values;
    let rows: Vec<f64> = (0..g.ny)
        .into_par_iter()
        .map(|j| {
            let mut s = 0.0;
            for i in 0..g.nx {
                let k = g.index(i, j);
                let p = g.center(i, j);
                if i + 1 < g.nx && crate::norm([p[0] + 0.5 * h - c[0], p[1] - c[1]]) <= cut {
                    s += (v[k + 1] - v[k]).powi(2);
                }
                if j + 1 < g.ny && crate::norm([p[0] - c[0], p[1] + 0.5 * h - c[1]]) <= cut {
                    s += (v[k + g.nx] - v[k]).powi(2);
                }
            }
            s
        })
        .collect();
    let far = FarField::fit(hf, c, 0.9 * r_box, 16);
    FieldEnergy { grid: rows.iter().sum(), tail: far.tail_pairing(&far, cut) }
}

/// `int f_eta(y - x) dmu(y)` with `f_eta = min(-log|.| + log eta, 0)`, by polar
/// Gauss-Legendre quadrature over `B(x, eta)` (substitution `r = eta s^2`).
pub fn smeared_correction(x: Point, eta: f64, density: &dyn Fn(Point) -> f64) -> f64 {
    let (nodes, weights) = gauss_legendre(24);
    let m = 64;
    let mut s = 0.0;
    for (sn, w) in nodes.iter().zip(&weights) {
        let sv = 0.5 * (sn + 1.0);
        let r = eta * sv * sv;
        // f = log(r / eta) = 2 log s; dr = 2 eta s ds; area element r dr
        let radial = 2.0 * sv.ln() * r * 2.0 * eta * sv * 0.5 * w;
        let mut ang = 0.0;
        for a in 0..m {
            let t = 2.0 * PI * (a as f64 + 0.5) / m as f64;
            ang += density([x[0] + r * t.cos(), x[1] + r * t.sin()]);
        }
        s += radial * ang * 2.0 * PI / m as f64;
    }
    s
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                let dp = {
                    let (mut p0, mut p1) = (1.0, z);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    n as f64 * (z * p1 - p0) / (z * z - 1.0)
                };
                w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
                break;
            }
        }
        x[i] = z;
    }
    (x, w)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    #[serde(rename = "FN")]
    pub fn_value: f64,
    /// `int |grad H_{N,eta}|^2`, grid and tail parts.
    pub field_energy: FieldEnergy,
    /// `sum log eta_i`
    pub log_eta: f64,
    /// `2N sum int f_{eta_i}(x - x_i) dmu`
    pub smearing: f64,
    /// `(1/2pi) int |grad H|^2 + sum log eta_i + smearing`
    pub rhs: f64,
    pub residual: f64,
    pub relative_residual: f64,
    /// Whether every `eta_i <= r(x_i)` (equality case).
    pub equality_case: bool,
    /// Sandwich bounds on `F_N - rhs` for general radii.
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub sandwich_holds: bool,
    /// `2N ||mu||_inf sum pi eta_i^2 / 2`
    pub smearing_bound: f64,
}

/// Both sides of the truncation identity
/// `F_N = (1/2pi) (int |grad H_{N,eta}|^2 + 2pi sum log eta_i) + 2N sum int f_{eta_i} dmu`,
/// exact when `eta_i <= r(x_i)`, with the overlap sandwich otherwise.
pub fn truncated_energy_identity(x: &Configuration, bg: &Background, eta: &TruncationVector) -> Result<TruncationReport> {
    let n = x.n();
    let nf = n as f64;
    let f = next_order_energy(x, bg)?.fn_value;
    let hf = truncated_potential_field(x, bg, eta)?;
    let fe = field_energy(&hf);
    let log_eta: f64 = eta.eta.iter().map(|e| e.ln()).sum();
    let dens = |p: Point| bg.density_at(p);
    let smear: f64 = 2.0 * nf * x.points.iter().zip(&eta.eta).map(|(&p, &e)| smeared_correction(p, e, &dens)).sum::<f64>();
    let rhs = fe.total() / (2.0 * PI) + log_eta + smear;
    let r = nn_truncation(x)?;
    let equality_case = eta.eta.iter().zip(&r.eta).all(|(e, rr)| e <= &(rr * (1.0 + 1e-12)));
    let (mut lo, mut hi) = (0.0, 0.0);
    let p = &x.points;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = crate::dist2(p[i], p[j]).sqrt();
            if d <= eta.eta[i] + eta.eta[j] {
                let g = -d.ln();
                lo += g - (-eta.eta[i].ln()).min(-eta.eta[j].ln());
                hi += g;
            }
        }
    }
    let gap = f - rhs;
    // grid tolerance on the sandwich: the identity residual scale
    let tol = 5e-2 * f.abs().max(1.0);
    let smearing_bound = 2.0 * nf * bg.mu.max_density() * eta.eta.iter().map(|e| PI * e * e / 2.0).sum::<f64>();
    Ok(TruncationReport {
        fn_value: f,
        field_energy: fe,
        log_eta,
        smearing: smear,
        rhs,
        residual: (f - rhs).abs(),
        relative_residual: (f - rhs).abs() / f.abs().max(1e-300),
        equality_case,
        lower_bound: lo,
        upper_bound: hi,
        sandwich_holds: lo - tol <= gap && gap <= hi + tol,
        smearing_bound,
    })
}

/// Average of `phi` over the circle of radius `eta` about `x` (64 nodes).
pub fn circle_average(phi: &TestFunction, x: Point, eta: f64) -> f64 {
    let m = 64;
    (0..m)
        .map(|a| {
            let t = 2.0 * PI * a as f64 / m as f64;
            phi.value([x[0] + eta * t.cos(), x[1] + eta * t.sin()])
        })
        .sum::<f64>()
        / m as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - |lhs|`
    pub slack: f64,
    pub holds: bool,
}

/// `|int phi d(sum delta^{(eta_i)} - N mu)| <= (1/2pi) ||grad phi|| ||grad H_{N,eta}||`,
/// with a relative margin `margin` on the right side.
pub fn fluct_energy_bound_check(
    x: &Configuration,
    bg: &Background,
    phi: &TestFunction,
    eta: &TruncationVector,
    margin: f64,
) -> Result<BoundCheck> {
    let nf = x.n() as f64;
    let charges: f64 = x.points.iter().zip(&eta.eta).map(|(&p, &e)| circle_average(phi, p, e)).sum();
    let lhs = charges - nf * bg.mu.integrate(|p| phi.value(p));
    let g = bg.grid();
    let grad2: f64 = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let d = phi.gradient(g.center_of(k));
            d[0] * d[0] + d[1] * d[1]
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum::<f64>()
        * g.cell_area();
    let hf = truncated_potential_field(x, bg, eta)?;
    let fe = field_energy(&hf).total();
    let rhs = grad2.sqrt() * fe.sqrt() / (2.0 * PI);
    Ok(BoundCheck { lhs, rhs, slack: rhs - lhs.abs(), holds: lhs.abs() <= rhs * (1.0 + margin) })
}

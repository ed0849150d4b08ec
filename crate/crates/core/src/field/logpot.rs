//! Logarithmic potentials `h^mu(x) = int -log|x - y| dmu(y)` of grid measures.
//!
//! Each source cell is treated as a uniform square of charge. Near cells use
//! the closed-form integral of `-log` over a square; far cells use the
//! midpoint value, whose error is fourth order in `spacing / distance`
//! because the second moment term vanishes for a square (`-log` is harmonic).

use std::f64::consts::PI;

use rustfft::{num_complex::Complex64, FftPlanner};

use super::grid::{Grid2D, Measure2D, ScalarField2D};
use crate::{Point, Result};

/// Cells closer than this many spacings use the exact square integral.
const NEAR_CELLS: f64 = 6.0;

/// `A(u, v)` with `d^2 A / du dv = ln(u^2 + v^2)`.
fn antiderivative(u: f64, v: f64) -> f64 {
    let r2 = u * u + v * v;
    if r2 == 0.0 {
        return 0.0;
    }
    let mut a = u * v * r2.ln() - 3.0 * u * v;
    if u != 0.0 {
        a += u * u * (v / u).atan();
    }
    if v != 0.0 {
        a += v * v * (u / v).atan();
    }
    a
}

/// `int over [u0,u1]x[v0,v1] of -log sqrt(u^2 + v^2)`.
pub fn rect_log_integral(u0: f64, u1: f64, v0: f64, v1: f64) -> f64 {
    -0.5 * (antiderivative(u1, v1) - antiderivative(u0, v1) - antiderivative(u1, v0) + antiderivative(u0, v0))
}

/// `int_{cell} -log|d - y| dy` for a square cell of side `h` centred at the
/// origin, evaluated at offset `d = (dx, dy)`.
pub fn cell_log_integral(dx: f64, dy: f64, h: f64) -> f64 {
    let r2 = dx * dx + dy * dy;
    if r2 > (NEAR_CELLS * h).powi(2) {
        return -0.5 * h * h * r2.ln();
    }
    let a = 0.5 * h;
    rect_log_integral(dx - a, dx + a, dy - a, dy + a)
}

/// `B(u, v) = int ln sqrt(u^2 + v^2) dv`.
fn line_antiderivative(u: f64, v: f64) -> f64 {
    let r2 = u * u + v * v;
    let mut b = if r2 > 0.0 { 0.5 * v * r2.ln() - v } else { 0.0 };
    if u != 0.0 {
        b += u * (v / u).atan();
    }
    b
}

/// Gradient in `d` of [`cell_log_integral`].
pub fn cell_log_gradient(dx: f64, dy: f64, h: f64) -> [f64; 2] {
    let r2 = dx * dx + dy * dy;
    if r2 > (NEAR_CELLS * h).powi(2) {
        return [-h * h * dx / r2, -h * h * dy / r2];
    }
    let a = 0.5 * h;
    // d/ddx of -int int ln|u,v| over u in [dx-a, dx+a]: boundary terms in u.
    let gx = -((line_antiderivative(dx + a, dy + a) - line_antiderivative(dx + a, dy - a))
        - (line_antiderivative(dx - a, dy + a) - line_antiderivative(dx - a, dy - a)));
    let gy = -((line_antiderivative(dy + a, dx + a) - line_antiderivative(dy + a, dx - a))
        - (line_antiderivative(dy - a, dx + a) - line_antiderivative(dy - a, dx - a)));
    [gx, gy]
}

fn sources(mu: &Measure2D) -> Vec<(Point, f64)> {
    let g = mu.grid();
    mu.density
        .values
        .iter()
        .enumerate()
        .filter(|(_, &d)| d != 0.0)
        .map(|(k, &d)| (g.center_of(k), d))
        .collect()
}

/// `h^mu(x)` at an arbitrary point by direct summation over source cells.
pub fn potential_at(mu: &Measure2D, x: Point) -> f64 {
    let h = mu.grid().spacing;
    let g = mu.grid();
    let mut s = 0.0;
    for (k, &d) in mu.density.values.iter().enumerate() {
        if d != 0.0 {
            let c = g.center_of(k);
            s += d * cell_log_integral(x[0] - c[0], x[1] - c[1], h);
        }
    }
    s
}

/// `grad h^mu(x)` by direct summation.
pub fn potential_gradient_at(mu: &Measure2D, x: Point) -> [f64; 2] {
    let g = mu.grid();
    let h = g.spacing;
    let mut s = [0.0; 2];
    for (k, &d) in mu.density.values.iter().enumerate() {
        if d != 0.0 {
            let c = g.center_of(k);
            let gr = cell_log_gradient(x[0] - c[0], x[1] - c[1], h);
            s[0] += d * gr[0];
            s[1] += d * gr[1];
        }
    }
    s
}

/// Potential at many points (parallel over points).
pub fn potential_at_points(mu: &Measure2D, xs: &[Point]) -> Vec<f64> {
    use rayon::prelude::*;
    let src = sources(mu);
    let h = mu.grid().spacing;
    xs.par_iter()
        .map(|x| src.iter().map(|(c, d)| d * cell_log_integral(x[0] - c[0], x[1] - c[1], h)).sum())
        .collect()
}

/// Direct double sum over source cells, evaluated at the centres of `eval`.
pub fn log_potential_direct(mu: &Measure2D, eval: &Grid2D) -> ScalarField2D {
    use rayon::prelude::*;
    let src = sources(mu);
    let h = mu.grid().spacing;
    let values = (0..eval.len())
        .into_par_iter()
        .map(|k| {
            let x = eval.center_of(k);
            src.iter().map(|(c, d)| d * cell_log_integral(x[0] - c[0], x[1] - c[1], h)).sum()
        })
        .collect();
    ScalarField2D { grid: *eval, values }
}

/// Precomputed kernel spectrum for repeated FFT convolutions on one grid.
pub struct LogConvolver {
    grid: Grid2D,
    mx: usize,
    my: usize,
    kernel_hat: Vec<Complex64>,
}

impl LogConvolver {
    pub fn new(grid: Grid2D) -> Self {
        let (mx, my) = (2 * grid.nx, 2 * grid.ny);
        let h = grid.spacing;
        let mut k = vec![Complex64::new(0.0, 0.0); mx * my];
        for b in 0..my {
            let dj = if b < grid.ny { b as f64 } else { b as f64 - my as f64 };
            for a in 0..mx {
                let di = if a < grid.nx { a as f64 } else { a as f64 - mx as f64 };
                k[b * mx + a] = Complex64::new(cell_log_integral(di * h, dj * h, h), 0.0);
            }
        }
        fft2(&mut k, mx, my, false);
        Self { grid, mx, my, kernel_hat: k }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    /// Convolves a density (mass per area, per cell) with the cell kernel.
    pub fn apply(&self, density: &ScalarField2D) -> Result<ScalarField2D> {
        self.grid.check_same(&density.grid, "log potential")?;
        let (mx, my) = (self.mx, self.my);
        let g = self.grid;
        let mut a = vec![Complex64::new(0.0, 0.0); mx * my];
        for j in 0..g.ny {
            for i in 0..g.nx {
                a[j * mx + i] = Complex64::new(density.values[g.index(i, j)], 0.0);
            }
        }
        fft2(&mut a, mx, my, false);
        for (x, k) in a.iter_mut().zip(&self.kernel_hat) {
            *x *= k;
        }
        fft2(&mut a, mx, my, true);
        let scale = 1.0 / (mx * my) as f64;
        let mut values = vec![0.0; g.len()];
        for j in 0..g.ny {
            for i in 0..g.nx {
                values[g.index(i, j)] = a[j * mx + i].re * scale;
            }
        }
        Ok(ScalarField2D { grid: g, values })
    }
}

fn fft2(data: &mut [Complex64], mx: usize, my: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (px, py) = if inverse {
        (planner.plan_fft_inverse(mx), planner.plan_fft_inverse(my))
    } else {
        (planner.plan_fft_forward(mx), planner.plan_fft_forward(my))
    };
    for row in data.chunks_exact_mut(mx) {
        px.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); my];
    for a in 0..mx {
        for b in 0..my {
            col[b] = data[b * mx + a];
        }
        py.process(&mut col);
        for b in 0..my {
            data[b * mx + a] = col[b];
        }
    }
}

/// FFT-accelerated potential on the source grid itself.
pub fn log_potential_fft(mu: &Measure2D) -> ScalarField2D {
    LogConvolver::new(mu.grid()).apply(&mu.density).expect("same grid")
}

/// `h^mu` on `eval`: FFT convolution when `eval` is the source grid, direct
/// summation otherwise. Both paths share the cell kernel.
pub fn log_potential(mu: &Measure2D, eval: &Grid2D) -> ScalarField2D {
    if mu.grid().same_as(eval) {
        log_potential_fft(mu)
    } else {
        log_potential_direct(mu, eval)
    }
}

/// `int int -log|x - y| dmu dmu` from a potential already on the source grid.
pub fn self_energy(mu: &Measure2D, h_mu: &ScalarField2D) -> f64 {
    mu.density.values.iter().zip(&h_mu.values).map(|(d, h)| d * h).sum::<f64>() * mu.grid().cell_area()
}

/// Exact value of `int_{B(0, eta)} |f_eta|` with `f_eta = min(-log|x| + log eta, 0)`.
pub fn smearing_constant(eta: f64) -> f64 {
    PI * eta * eta / 2.0
}

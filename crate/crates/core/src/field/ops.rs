use super::grid::{Grid2D, Mask, ScalarField2D, VectorField2D};
use crate::Result;

/// Midpoint rule `sum f(cell) h^2` over the selected cells.
pub fn quadrature(f: &ScalarField2D, region: Option<&Mask>) -> Result<f64> {
    let area = f.grid.cell_area();
    match region {
        None => Ok(f.values.iter().sum::<f64>() * area),
        Some(m) => {
            f.grid.check_same(&m.grid, "quadrature region")?;
            Ok(f.values.iter().zip(&m.cells).filter(|(_, &c)| c).map(|(v, _)| v).sum::<f64>() * area)
        }
    }
}

/// Five-point Laplacian. Edge cells have no full stencil: they are set to 0
/// and reported invalid in the returned mask.
pub fn discrete_laplacian(f: &ScalarField2D) -> (ScalarField2D, Mask) {
    let g = f.grid;
    let inv = 1.0 / (g.spacing * g.spacing);
    let mut out = vec![0.0; g.len()];
    let mut valid = vec![false; g.len()];
    for j in 1..g.ny - 1 {
        for i in 1..g.nx - 1 {
            let k = g.index(i, j);
            out[k] = (f.values[k + 1] + f.values[k - 1] + f.values[k + g.nx] + f.values[k - g.nx] - 4.0 * f.values[k]) * inv;
            valid[k] = true;
        }
    }
    (ScalarField2D { grid: g, values: out }, Mask { grid: g, cells: valid })
}

/// Centered-difference gradient; one-sided at the box edges.
pub fn gradient(f: &ScalarField2D) -> VectorField2D {
    let g = f.grid;
    let h = g.spacing;
    let mut out = vec![[0.0; 2]; g.len()];
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.index(i, j);
            let gx = if i == 0 {
                (f.at(1, j) - f.at(0, j)) / h
            } else if i + 1 == g.nx {
                (f.at(i, j) - f.at(i - 1, j)) / h
            } else {
                (f.at(i + 1, j) - f.at(i - 1, j)) / (2.0 * h)
            };
            let gy = if j == 0 {
                (f.at(i, 1) - f.at(i, 0)) / h
            } else if j + 1 == g.ny {
                (f.at(i, j) - f.at(i, j - 1)) / h
            } else {
                (f.at(i, j + 1) - f.at(i, j - 1)) / (2.0 * h)
            };
            out[k] = [gx, gy];
        }
    }
    VectorField2D { grid: g, values: out }
}

/// `int_region |grad f|^2` with centered differences and the midpoint rule.
pub fn dirichlet_energy(f: &ScalarField2D, region: Option<&Mask>) -> Result<f64> {
    if let Some(m) = region {
        f.grid.check_same(&m.grid, "dirichlet energy region")?;
    }
    let gr = gradient(f);
    let area = f.grid.cell_area();
    let mut s = 0.0;
    for (k, v) in gr.values.iter().enumerate() {
        if region.is_none_or(|m| m.cells[k]) {
            s += v[0] * v[0] + v[1] * v[1];
        }
    }
    Ok(s * area)
}

/// `int_region grad f . grad g`, same discretization as [`dirichlet_energy`].
pub fn dirichlet_pairing(f: &ScalarField2D, g: &ScalarField2D, region: Option<&Mask>) -> Result<f64> {
    f.grid.check_same(&g.grid, "dirichlet pairing")?;
    let a = gradient(f);
    let b = gradient(g);
    let area = f.grid.cell_area();
    let mut s = 0.0;
    for k in 0..f.grid.len() {
        if region.is_none_or(|m| m.cells[k]) {
            s += a.values[k][0] * b.values[k][0] + a.values[k][1] * b.values[k][1];
        }
    }
    Ok(s * area)
}

/// Divergence of a vector field by centered differences (zero on edges).
pub fn divergence(v: &VectorField2D) -> ScalarField2D {
    let g: Grid2D = v.grid;
    let h = g.spacing;
    let mut out = vec![0.0; g.len()];
    for j in 1..g.ny - 1 {
        for i in 1..g.nx - 1 {
            out[g.index(i, j)] = (v.at(i + 1, j)[0] - v.at(i - 1, j)[0] + v.at(i, j + 1)[1] - v.at(i, j - 1)[1]) / (2.0 * h);
        }
    }
    ScalarField2D { grid: g, values: out }
}

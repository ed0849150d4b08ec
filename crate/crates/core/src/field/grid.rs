use serde::{Deserialize, Serialize};

use crate::{Error, Point, Result};

/// Uniform cell-centred grid. Cell `(i, j)` has centre
/// `origin + (i + 1/2, j + 1/2) * spacing`; storage is row-major in `j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub origin: Point,
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid2D {
    pub fn new(origin: Point, spacing: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidInput(format!("spacing must be positive, got {spacing}")));
        }
        if nx < 4 || ny < 4 {
            return Err(Error::InvalidInput(format!("grid needs at least 4x4 cells, got {nx}x{ny}")));
        }
        if !(origin[0].is_finite() && origin[1].is_finite()) {
            return Err(Error::InvalidInput("non-finite origin".into()));
        }
        Ok(Self { origin, spacing, nx, ny })
    }

    /// Square box `[-half_width, half_width]^2` split into `n x n` cells.
    pub fn centered(half_width: f64, n: usize) -> Self {
        Self::new([-half_width, -half_width], 2.0 * half_width / n as f64, n, n)
            .expect("valid centered grid")
    }

    /// Square box of side `2 * half_width` around `center`.
    pub fn centered_at(center: Point, half_width: f64, n: usize) -> Self {
        Self::new(
            [center[0] - half_width, center[1] - half_width],
            2.0 * half_width / n as f64,
            n,
            n,
        )
        .expect("valid centered grid")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize) -> Point {
        [
            self.origin[0] + (i as f64 + 0.5) * self.spacing,
            self.origin[1] + (j as f64 + 0.5) * self.spacing,
        ]
    }

    #[inline]
    pub fn center_of(&self, k: usize) -> Point {
        let (i, j) = self.coords(k);
        self.center(i, j)
    }

    /// Grid node (cell corner) `(i, j)`, `0 <= i <= nx`.
    #[inline]
    pub fn node(&self, i: usize, j: usize) -> Point {
        [
            self.origin[0] + i as f64 * self.spacing,
            self.origin[1] + j as f64 * self.spacing,
        ]
    }

    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.spacing * self.spacing
    }

    pub fn upper(&self) -> Point {
        [
            self.origin[0] + self.nx as f64 * self.spacing,
            self.origin[1] + self.ny as f64 * self.spacing,
        ]
    }

    pub fn contains(&self, p: Point) -> bool {
        let u = self.upper();
        p[0] >= self.origin[0] && p[0] <= u[0] && p[1] >= self.origin[1] && p[1] <= u[1]
    }

    /// Cell containing `p`, if any.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let fx = (p[0] - self.origin[0]) / self.spacing;
        let fy = (p[1] - self.origin[1]) / self.spacing;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (i, j) = (fx as usize, fy as usize);
        (i < self.nx && j < self.ny).then_some((i, j))
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.nx || j + 1 == self.ny
    }

    /// Same box, spacing halved.
    pub fn refined(&self) -> Self {
        Self { origin: self.origin, spacing: self.spacing / 2.0, nx: 2 * self.nx, ny: 2 * self.ny }
    }

    /// Same box, spacing doubled (requires even cell counts).
    pub fn coarsened(&self) -> Option<Self> {
        (self.nx % 2 == 0 && self.ny % 2 == 0 && self.nx >= 8 && self.ny >= 8).then(|| Self {
            origin: self.origin,
            spacing: self.spacing * 2.0,
            nx: self.nx / 2,
            ny: self.ny / 2,
        })
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.spacing * (self.nx as f64).hypot(self.ny as f64)
    }

    pub fn box_center(&self) -> Point {
        let u = self.upper();
        [0.5 * (self.origin[0] + u[0]), 0.5 * (self.origin[1] + u[1])]
    }

    pub(crate) fn same_as(&self, other: &Grid2D) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && (self.spacing - other.spacing).abs() <= 1e-14 * self.spacing
            && (self.origin[0] - other.origin[0]).abs() <= 1e-12 * self.spacing.max(1.0)
            && (self.origin[1] - other.origin[1]).abs() <= 1e-12 * self.spacing.max(1.0)
    }

    pub(crate) fn check_same(&self, other: &Grid2D, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{what}: {self:?} vs {other:?}")))
        }
    }
}

/// Real values on the cells of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField2D {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

impl ScalarField2D {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at cell {k}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: Grid2D, c: f64) -> Self {
        Self { grid, values: vec![c; grid.len()] }
    }

    /// Samples `f` at every cell centre.
    pub fn from_fn(grid: Grid2D, f: impl Fn(Point) -> f64 + Sync) -> Self {
        use rayon::prelude::*;
        let values = (0..grid.len()).into_par_iter().map(|k| f(grid.center_of(k))).collect();
        Self { grid, values }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.check_same(&other.grid, "zip_with")?;
        Ok(Self {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Bilinear interpolation between cell centres, clamped at the box edge.
    pub fn sample(&self, p: Point) -> f64 {
        let g = &self.grid;
        let fx = ((p[0] - g.origin[0]) / g.spacing - 0.5).clamp(0.0, (g.nx - 1) as f64);
        let fy = ((p[1] - g.origin[1]) / g.spacing - 0.5).clamp(0.0, (g.ny - 1) as f64);
        let i0 = (fx as usize).min(g.nx - 2);
        let j0 = (fy as usize).min(g.ny - 2);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let v00 = self.at(i0, j0);
        let v10 = self.at(i0 + 1, j0);
        let v01 = self.at(i0, j0 + 1);
        let v11 = self.at(i0 + 1, j0 + 1);
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
    }
}

/// A 2-vector per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorField2D {
    pub grid: Grid2D,
    pub values: Vec<[f64; 2]>,
}

impl VectorField2D {
    pub fn zeros(grid: Grid2D) -> Self {
        Self { grid, values: vec![[0.0; 2]; grid.len()] }
    }

    pub fn from_fn(grid: Grid2D, f: impl Fn(Point) -> [f64; 2] + Sync) -> Self {
        use rayon::prelude::*;
        let values = (0..grid.len()).into_par_iter().map(|k| f(grid.center_of(k))).collect();
        Self { grid, values }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        self.values[self.grid.index(i, j)]
    }

    pub fn component(&self, c: usize) -> ScalarField2D {
        ScalarField2D { grid: self.grid, values: self.values.iter().map(|v| v[c]).collect() }
    }

    pub fn sample(&self, p: Point) -> [f64; 2] {
        [self.component(0).sample(p), self.component(1).sample(p)]
    }
}

/// Boolean per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub grid: Grid2D,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn from_fn(grid: Grid2D, f: impl Fn(Point) -> bool) -> Self {
        Self { grid, cells: (0..grid.len()).map(|k| f(grid.center_of(k))).collect() }
    }

    pub fn full(grid: Grid2D) -> Self {
        Self { grid, cells: vec![true; grid.len()] }
    }

    pub fn empty(grid: Grid2D) -> Self {
        Self { grid, cells: vec![false; grid.len()] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[self.grid.index(i, j)]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// Cells of the mask with a 4-neighbour outside it.
    pub fn boundary_cells(&self) -> Vec<(usize, usize)> {
        let g = self.grid;
        let mut out = Vec::new();
        for j in 0..g.ny {
            for i in 0..g.nx {
                if !self.get(i, j) {
                    continue;
                }
                let outside = |a: isize, b: isize| {
                    a < 0 || b < 0 || a >= g.nx as isize || b >= g.ny as isize || !self.get(a as usize, b as usize)
                };
                let (a, b) = (i as isize, j as isize);
                if outside(a + 1, b) || outside(a - 1, b) || outside(a, b + 1) || outside(a, b - 1) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Dilation by `r` cells in the 8-neighbour sense.
    pub fn dilate(&self, r: usize) -> Self {
        let g = self.grid;
        let mut cells = self.cells.clone();
        for _ in 0..r {
            let prev = cells.clone();
            for j in 0..g.ny {
                for i in 0..g.nx {
                    if prev[g.index(i, j)] {
                        continue;
                    }
                    let mut hit = false;
                    for dj in -1isize..=1 {
                        for di in -1isize..=1 {
                            let (a, b) = (i as isize + di, j as isize + dj);
                            if a >= 0 && b >= 0 && (a as usize) < g.nx && (b as usize) < g.ny && prev[g.index(a as usize, b as usize)] {
                                hit = true;
                            }
                        }
                    }
                    cells[g.index(i, j)] = hit;
                }
            }
        }
        Self { grid: g, cells }
    }

    /// Connected components (4-connectivity), labelled from 0; `None` off the mask.
    pub fn components(&self) -> (Vec<Option<usize>>, usize) {
        let g = self.grid;
        let mut label = vec![None; g.len()];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..g.len() {
            if !self.cells[start] || label[start].is_some() {
                continue;
            }
            label[start] = Some(next);
            stack.push(start);
            while let Some(k) = stack.pop() {
                let (i, j) = g.coords(k);
                let mut push = |a: usize, b: usize| {
                    let m = g.index(a, b);
                    if self.cells[m] && label[m].is_none() {
                        label[m] = Some(next);
                        stack.push(m);
                    }
                };
                if i > 0 {
                    push(i - 1, j);
                }
                if i + 1 < g.nx {
                    push(i + 1, j);
                }
                if j > 0 {
                    push(i, j - 1);
                }
                if j + 1 < g.ny {
                    push(i, j + 1);
                }
            }
            next += 1;
        }
        (label, next)
    }

    /// Largest distance between two cell centres of the mask (bounding-box estimate).
    pub fn diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for (k, &c) in self.cells.iter().enumerate() {
            if c {
                let p = self.grid.center_of(k);
                for d in 0..2 {
                    lo[d] = lo[d].min(p[d]);
                    hi[d] = hi[d].max(p[d]);
                }
            }
        }
        if lo[0] > hi[0] {
            return 0.0;
        }
        (hi[0] - lo[0] + self.grid.spacing).hypot(hi[1] - lo[1] + self.grid.spacing)
    }

    pub fn centroid(&self) -> Point {
        let mut s = [0.0; 2];
        let mut n = 0.0;
        for (k, &c) in self.cells.iter().enumerate() {
            if c {
                let p = self.grid.center_of(k);
                s[0] += p[0];
                s[1] += p[1];
                n += 1.0;
            }
        }
        [s[0] / n, s[1] / n]
    }
}

/// Region `{phi <= 0}` described by values of `phi` at the grid nodes, with
/// bilinear interpolation inside each cell. Used for sub-cell resolution of
/// the droplet boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSet {
    pub grid: Grid2D,
    /// `(nx + 1) * (ny + 1)` node values, row-major.
    pub nodes: Vec<f64>,
}

/// Sub-samples per axis used to resolve cut cells.
pub const SUBCELL: usize = 8;

impl LevelSet {
    pub fn from_fn(grid: Grid2D, phi: impl Fn(Point) -> f64) -> Self {
        let mut nodes = Vec::with_capacity((grid.nx + 1) * (grid.ny + 1));
        for j in 0..=grid.ny {
            for i in 0..=grid.nx {
                nodes.push(phi(grid.node(i, j)));
            }
        }
        Self { grid, nodes }
    }

    #[inline]
    fn node(&self, i: usize, j: usize) -> f64 {
        self.nodes[j * (self.grid.nx + 1) + i]
    }

    /// Bilinear value at `p` (clamped to the box).
    pub fn value(&self, p: Point) -> f64 {
        let g = &self.grid;
        let fx = ((p[0] - g.origin[0]) / g.spacing).clamp(0.0, g.nx as f64);
        let fy = ((p[1] - g.origin[1]) / g.spacing).clamp(0.0, g.ny as f64);
        let i0 = (fx as usize).min(g.nx - 1);
        let j0 = (fy as usize).min(g.ny - 1);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        (1.0 - ty) * ((1.0 - tx) * self.node(i0, j0) + tx * self.node(i0 + 1, j0))
            + ty * ((1.0 - tx) * self.node(i0, j0 + 1) + tx * self.node(i0 + 1, j0 + 1))
    }

    /// Value at the centre of cell `(i, j)`.
    pub fn center_value(&self, i: usize, j: usize) -> f64 {
        0.25 * (self.node(i, j) + self.node(i + 1, j) + self.node(i, j + 1) + self.node(i + 1, j + 1))
    }

    /// Cells whose centre lies in the region.
    pub fn mask(&self) -> Mask {
        let g = self.grid;
        let mut cells = vec![false; g.len()];
        for j in 0..g.ny {
            for i in 0..g.nx {
                cells[g.index(i, j)] = self.center_value(i, j) <= 0.0;
            }
        }
        Mask { grid: g, cells }
    }

    fn corners(&self, i: usize, j: usize) -> [f64; 4] {
        [self.node(i, j), self.node(i + 1, j), self.node(i, j + 1), self.node(i + 1, j + 1)]
    }

    /// Whether the zero level crosses cell `(i, j)`.
    pub fn is_cut(&self, i: usize, j: usize) -> bool {
        let c = self.corners(i, j);
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lo <= 0.0 && hi > 0.0
    }

    /// Sub-sample points of cell `(i, j)` lying in the region, in cell-local
    /// fractions; each carries weight `1 / SUBCELL^2` of the cell.
    pub fn inside_subsamples(&self, i: usize, j: usize) -> Vec<Point> {
        let c = self.corners(i, j);
        let mut out = Vec::new();
        for b in 0..SUBCELL {
            let ty = (b as f64 + 0.5) / SUBCELL as f64;
            for a in 0..SUBCELL {
                let tx = (a as f64 + 0.5) / SUBCELL as f64;
                let v = (1.0 - ty) * ((1.0 - tx) * c[0] + tx * c[1]) + ty * ((1.0 - tx) * c[2] + tx * c[3]);
                if v <= 0.0 {
                    let n = self.grid.node(i, j);
                    out.push([n[0] + tx * self.grid.spacing, n[1] + ty * self.grid.spacing]);
                }
            }
        }
        out
    }

    /// Fraction of cell `(i, j)` inside the region.
    pub fn coverage(&self, i: usize, j: usize) -> f64 {
        let c = self.corners(i, j);
        if c.iter().all(|&v| v <= 0.0) {
            return 1.0;
        }
        if c.iter().all(|&v| v > 0.0) {
            return 0.0;
        }
        self.inside_subsamples(i, j).len() as f64 / (SUBCELL * SUBCELL) as f64
    }

    /// Fraction `theta` in `[0, 1]` of the way from centre `a` to centre `b`
    /// at which the interpolated level crosses zero (linear in the centre values).
    pub fn crossing(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let va = self.center_value(a.0, a.1);
        let vb = self.center_value(b.0, b.1);
        if (va - vb).abs() < 1e-300 {
            return 0.5;
        }
        (va / (va - vb)).clamp(0.0, 1.0)
    }

    /// Unit outward normal `grad phi / |grad phi|` at `p` by central differences.
    pub fn normal(&self, p: Point) -> Option<[f64; 2]> {
        let h = self.grid.spacing;
        let gx = self.value([p[0] + h, p[1]]) - self.value([p[0] - h, p[1]]);
        let gy = self.value([p[0], p[1] + h]) - self.value([p[0], p[1] - h]);
        let n = gx.hypot(gy);
        (n > 1e-12 * h).then(|| [gx / n, gy / n])
    }

    /// Projects `p` onto the zero level by a few Newton steps along the normal.
    pub fn project(&self, p: Point) -> Option<Point> {
        let mut q = p;
        for _ in 0..8 {
            let n = self.normal(q)?;
            let h = self.grid.spacing;
            let gx = (self.value([q[0] + h, q[1]]) - self.value([q[0] - h, q[1]])) / (2.0 * h);
            let gy = (self.value([q[0], q[1] + h]) - self.value([q[0], q[1] - h])) / (2.0 * h);
            let slope = gx * n[0] + gy * n[1];
            if slope.abs() < 1e-12 {
                return None;
            }
            let v = self.value(q);
            q = [q[0] - v / slope * n[0], q[1] - v / slope * n[1]];
            if v.abs() < 1e-13 {
                break;
            }
        }
        Some(q)
    }
}

/// A measure with density on a grid. `density` holds cell-averaged mass per
/// unit area; when `boundary` is present, cut cells are resolved with sub-cell
/// samples for integration of smooth functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measure2D {
    pub density: ScalarField2D,
    pub support_mask: Mask,
    pub boundary: Option<CutBoundary>,
}

/// Sub-cell description of the support: the level set and the pointwise
/// density value in cut cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutBoundary {
    pub level: LevelSet,
    /// Pointwise density (before coverage weighting) for every cell.
    pub inner_density: Vec<f64>,
}

impl Measure2D {
    /// Density field with support where the density is positive.
    pub fn from_density(density: ScalarField2D) -> Result<Self> {
        if density.values.iter().any(|&d| d < 0.0) {
            return Err(Error::InvalidInput("negative density".into()));
        }
        let support_mask = Mask { grid: density.grid, cells: density.values.iter().map(|&d| d > 0.0).collect() };
        Ok(Self { density, support_mask, boundary: None })
    }

    /// Measure `rho * 1_{phi <= 0}` with cut cells weighted by their coverage.
    pub fn from_level_set(level: LevelSet, rho: impl Fn(Point) -> f64) -> Self {
        let g = level.grid;
        let mut density = vec![0.0; g.len()];
        let mut inner = vec![0.0; g.len()];
        let mut cells = vec![false; g.len()];
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.index(i, j);
                let cov = level.coverage(i, j);
                if cov > 0.0 {
                    let r = rho(g.center(i, j));
                    inner[k] = r;
                    density[k] = r * cov;
                    cells[k] = true;
                }
            }
        }
        Self {
            density: ScalarField2D { grid: g, values: density },
            support_mask: Mask { grid: g, cells },
            boundary: Some(CutBoundary { level, inner_density: inner }),
        }
    }

    pub fn grid(&self) -> Grid2D {
        self.density.grid
    }

    /// Midpoint-rule total mass.
    pub fn mass(&self) -> f64 {
        self.density.values.iter().sum::<f64>() * self.grid().cell_area()
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut m = self.clone();
        m.density.values.iter_mut().for_each(|v| *v *= a);
        if let Some(b) = m.boundary.as_mut() {
            b.inner_density.iter_mut().for_each(|v| *v *= a);
        }
        m
    }

    /// `int f dmu`; cut cells use sub-cell samples when the boundary is known.
    pub fn integrate(&self, f: impl Fn(Point) -> f64 + Sync) -> f64 {
        use rayon::prelude::*;
        let g = self.grid();
        let area = g.cell_area();
        let parts: Vec<f64> = (0..g.ny)
            .into_par_iter()
            .map(|j| {
                let mut s = 0.0;
                for i in 0..g.nx {
                    let k = g.index(i, j);
                    let d = self.density.values[k];
                    if d == 0.0 {
                        continue;
                    }
                    match &self.boundary {
                        Some(b) if b.level.is_cut(i, j) => {
                            let w = b.inner_density[k] * area / (SUBCELL * SUBCELL) as f64;
                            for p in b.level.inside_subsamples(i, j) {
                                s += w * f(p);
                            }
                        }
                        _ => s += d * area * f(g.center(i, j)),
                    }
                }
                s
            })
            .collect();
        parts.iter().sum()
    }

    pub fn max_density(&self) -> f64 {
        self.density.values.iter().cloned().fold(0.0, f64::max)
    }
}

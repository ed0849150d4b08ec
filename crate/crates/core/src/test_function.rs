//! Test functions `xi_N(x) = A * shape((x - c) / l)` with analytic
//! derivatives up to second order.

use serde::{Deserialize, Serialize};

use crate::{Error, Point, Result};

/// Value, gradient and Hessian at a point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: [f64; 2],
    pub h: [[f64; 2]; 2],
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Self { v, ..Default::default() }
    }

    pub fn mul(&self, o: &Jet) -> Jet {
        let mut h = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                h[a][b] = self.h[a][b] * o.v + self.g[a] * o.g[b] + self.g[b] * o.g[a] + self.v * o.h[a][b];
            }
        }
        Jet { v: self.v * o.v, g: [self.g[0] * o.v + self.v * o.g[0], self.g[1] * o.v + self.v * o.g[1]], h }
    }

    pub fn scale(&self, a: f64) -> Jet {
        Jet {
            v: a * self.v,
            g: [a * self.g[0], a * self.g[1]],
            h: [[a * self.h[0][0], a * self.h[0][1]], [a * self.h[1][0], a * self.h[1][1]]],
        }
    }

    pub fn laplacian(&self) -> f64 {
        self.h[0][0] + self.h[1][1]
    }

    /// Jet of `F(r)` with `r = |y|`, given `F(r), F'(r), F''(r)`.
    fn radial(y: Point, f: f64, f1: f64, f2: f64) -> Jet {
        let r = y[0].hypot(y[1]);
        if r < 1e-300 {
            // smooth radial functions have F'(0) = 0 and Hessian F''(0) I
            return Jet { v: f, g: [0.0; 2], h: [[f2, 0.0], [0.0, f2]] };
        }
        let u = [y[0] / r, y[1] / r];
        let mut h = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let d = if a == b { 1.0 } else { 0.0 };
                h[a][b] = f2 * u[a] * u[b] + f1 / r * (d - u[a] * u[b]);
            }
        }
        Jet { v: f, g: [f1 * u[0], f1 * u[1]], h }
    }
}

/// `exp(-1/s)` for `s > 0`, else 0, with two derivatives.
fn flat(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let f = (-1.0 / s).exp();
    (f, f / (s * s), f * (1.0 / s.powi(4) - 2.0 / s.powi(3)))
}

/// Smooth step: 1 for `r <= inner`, 0 for `r >= outer`, C-infinity between.
fn cutoff(r: f64, inner: f64, outer: f64) -> (f64, f64, f64) {
    if r <= inner {
        return (1.0, 0.0, 0.0);
    }
    if r >= outer {
        return (0.0, 0.0, 0.0);
    }
    let w = outer - inner;
    let s = (r - inner) / w;
    let (a, a1, a2) = flat(1.0 - s);
    let (a1, a2) = (-a1, a2);
    let (b, b1, b2) = flat(s);
    let d = a + b;
    let d1 = a1 + b1;
    let n = a1 * b - a * b1;
    let n1 = a2 * b - a * b2;
    let c = a / d;
    let c1 = n / (d * d);
    let c2 = (n1 * d - 2.0 * n * d1) / (d * d * d);
    (c, c1 / w, c2 / (w * w))
}

/// Unit-scale shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    /// `exp(1 - 1/(1 - |y|^2/R^2))` on `|y| < R`: peak value 1.
    Bump { radius: f64 },
    /// `sum c y1^p y2^q` times the smooth cutoff between `inner` and `outer`.
    PolyCutoff { terms: Vec<(u32, u32, f64)>, inner: f64, outer: f64 },
    /// `exp(-|y|^2 / (2 w^2))` times the smooth cutoff.
    GaussCutoff { width: f64, inner: f64, outer: f64 },
}

impl Shape {
    pub fn support_radius(&self) -> f64 {
        match self {
            Shape::Bump { radius } => *radius,
            Shape::PolyCutoff { outer, .. } | Shape::GaussCutoff { outer, .. } => *outer,
        }
    }

    pub fn jet(&self, y: Point) -> Jet {
        match self {
            Shape::Bump { radius } => {
                let r2 = (y[0] * y[0] + y[1] * y[1]) / (radius * radius);
                if r2 >= 1.0 {
                    return Jet::default();
                }
                let q = 1.0 / (1.0 - r2);
                let b = (1.0 - q).exp();
                // b(u) with u = |y|^2 / R^2
                let b1 = -b * q * q;
                let b2 = b * (q.powi(4) - 2.0 * q.powi(3));
                let s = 2.0 / (radius * radius);
                let mut h = [[0.0; 2]; 2];
                for a in 0..2 {
                    for c in 0..2 {
                        let d = if a == c { 1.0 } else { 0.0 };
                        h[a][c] = b2 * s * s * y[a] * y[c] + b1 * s * d;
                    }
                }
                Jet { v: b, g: [b1 * s * y[0], b1 * s * y[1]], h }
            }
            Shape::PolyCutoff { terms, inner, outer } => {
                let r = y[0].hypot(y[1]);
                if r >= *outer {
                    return Jet::default();
                }
                let (c, c1, c2) = cutoff(r, *inner, *outer);
                let chi = Jet::radial(y, c, c1, c2);
                poly_jet(terms, y).mul(&chi)
            }
            Shape::GaussCutoff { width, inner, outer } => {
                let r = y[0].hypot(y[1]);
                if r >= *outer {
                    return Jet::default();
                }
                let w2 = width * width;
                let g = (-r * r / (2.0 * w2)).exp();
                let gauss = Jet::radial(y, g, -g * r / w2, g * (r * r / (w2 * w2) - 1.0 / w2));
                let (c, c1, c2) = cutoff(r, *inner, *outer);
                gauss.mul(&Jet::radial(y, c, c1, c2))
            }
        }
    }
}

fn poly_jet(terms: &[(u32, u32, f64)], y: Point) -> Jet {
    let pw = |x: f64, p: i64| if p < 0 { 0.0 } else { x.powi(p as i32) };
    let mut j = Jet::default();
    for &(p, q, c) in terms {
        let (p, q) = (p as i64, q as i64);
        let (pf, qf) = (p as f64, q as f64);
        j.v += c * pw(y[0], p) * pw(y[1], q);
        j.g[0] += c * pf * pw(y[0], p - 1) * pw(y[1], q);
        j.g[1] += c * qf * pw(y[0], p) * pw(y[1], q - 1);
        j.h[0][0] += c * pf * (pf - 1.0) * pw(y[0], p - 2) * pw(y[1], q);
        j.h[1][1] += c * qf * (qf - 1.0) * pw(y[0], p) * pw(y[1], q - 2);
        let m = c * pf * qf * pw(y[0], p - 1) * pw(y[1], q - 1);
        j.h[0][1] += m;
        j.h[1][0] += m;
    }
    j
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularity {
    C21Interior,
    C31Boundary,
    C21Mesoscopic,
}

/// `xi_N(x) = amplitude * shape((x - center) / scale)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub name: String,
    pub shape: Shape,
    pub amplitude: f64,
    pub center: Point,
    pub scale: f64,
    pub regularity: Regularity,
}

impl TestFunction {
    pub fn new(name: &str, shape: Shape, amplitude: f64, center: Point, scale: f64, regularity: Regularity) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("test function scale must be positive, got {scale}")));
        }
        if !amplitude.is_finite() {
            return Err(Error::InvalidInput("non-finite amplitude".into()));
        }
        Ok(Self { name: name.into(), shape, amplitude, center, scale, regularity })
    }

    /// Radial bump of the given radius and peak value at `center`.
    pub fn bump(center: Point, radius: f64, amplitude: f64) -> Self {
        Self {
            name: "bump".into(),
            shape: Shape::Bump { radius },
            amplitude,
            center,
            scale: 1.0,
            regularity: Regularity::C21Interior,
        }
    }

    pub fn zero() -> Self {
        Self { amplitude: 0.0, ..Self::bump([0.0, 0.0], 1.0, 0.0) }
    }

    /// Same shape with amplitude multiplied by `a`.
    pub fn scaled(&self, a: f64) -> Self {
        Self { amplitude: self.amplitude * a, ..self.clone() }
    }

    /// Same template at a new scale.
    pub fn with_scale(&self, scale: f64) -> Self {
        Self { scale, ..self.clone() }
    }

    pub fn support_radius(&self) -> f64 {
        self.shape.support_radius() * self.scale
    }

    pub fn jet(&self, x: Point) -> Jet {
        let l = self.scale;
        let y = [(x[0] - self.center[0]) / l, (x[1] - self.center[1]) / l];
        if self.amplitude == 0.0 || y[0].hypot(y[1]) >= self.shape.support_radius() {
            return Jet::default();
        }
        let j = self.shape.jet(y);
        let a = self.amplitude;
        Jet {
            v: a * j.v,
            g: [a * j.g[0] / l, a * j.g[1] / l],
            h: [
                [a * j.h[0][0] / (l * l), a * j.h[0][1] / (l * l)],
                [a * j.h[1][0] / (l * l), a * j.h[1][1] / (l * l)],
            ],
        }
    }

    pub fn value(&self, x: Point) -> f64 {
        self.jet(x).v
    }

    pub fn gradient(&self, x: Point) -> [f64; 2] {
        self.jet(x).g
    }

    pub fn laplacian(&self, x: Point) -> f64 {
        self.jet(x).laplacian()
    }

    pub fn hessian(&self, x: Point) -> [[f64; 2]; 2] {
        self.jet(x).h
    }

    /// Whether the support disk is contained in `{x : inside(x)}`, sampled on
    /// its bounding circle and a polar grid.
    pub fn support_inside(&self, inside: impl Fn(Point) -> bool) -> bool {
        let r = self.support_radius();
        (0..=16).all(|a| {
            let rr = r * a as f64 / 16.0;
            (0..128).all(|s| {
                let t = s as f64 * std::f64::consts::PI / 64.0;
                inside([self.center[0] + rr * t.cos(), self.center[1] + rr * t.sin()])
            })
        })
    }
}

/// The fixed library: three interior bumps, one boundary-straddling bump and
/// the mesoscopic template (radius-2.5 bump at the origin, rescaled by `l_N`).
pub fn library() -> Vec<TestFunction> {
    use Regularity::*;
    let b = |name: &str, c: Point, r: f64, reg| TestFunction::new(name, Shape::Bump { radius: r }, 1.0, c, 1.0, reg).unwrap();
    vec![
        b("bump-center", [0.0, 0.0], 0.8, C21Interior),
        b("bump-offset", [0.3, -0.2], 0.4, C21Interior),
        b("bump-small", [-0.35, 0.35], 0.3, C21Interior),
        b("bump-edge", [0.9, 0.0], 0.6, C31Boundary),
        b("meso", [0.0, 0.0], 2.5, C21Mesoscopic),
    ]
}

/// Library entry by name.
pub fn by_name(name: &str) -> Result<TestFunction> {
    library()
        .into_iter()
        .chain(boundary_library())
        .find(|t| t.name == name)
        .ok_or_else(|| Error::InvalidInput(format!("unknown test function '{name}'")))
}

/// Test functions with non-trivial data on the unit circle.
pub fn boundary_library() -> Vec<TestFunction> {
    use Regularity::C31Boundary;
    let cut = |terms: Vec<(u32, u32, f64)>| Shape::PolyCutoff { terms, inner: 1.5, outer: 2.5 };
    vec![
        TestFunction::new("dipole", cut(vec![(1, 0, 1.0)]), 1.0, [0.0, 0.0], 1.0, C31Boundary).unwrap(),
        TestFunction::new("quadrupole", cut(vec![(2, 0, 1.0), (0, 2, -1.0)]), 1.0, [0.0, 0.0], 1.0, C31Boundary).unwrap(),
        TestFunction::new("mixed-poly", cut(vec![(1, 1, 1.0), (0, 1, 0.5), (2, 0, 0.3)]), 1.0, [0.0, 0.0], 1.0, C31Boundary)
            .unwrap(),
        TestFunction::new("bump-edge-wide", Shape::Bump { radius: 0.8 }, 1.0, [1.0, 0.2], 1.0, C31Boundary).unwrap(),
        TestFunction::new(
            "gauss-shift",
            Shape::GaussCutoff { width: 0.6, inner: 1.2, outer: 2.0 },
            1.0,
            [0.4, 0.0],
            1.0,
            C31Boundary,
        )
        .unwrap(),
    ]
}

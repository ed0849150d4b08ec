//! Confining potentials `V`.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::test_function::TestFunction;
use crate::{Error, Point, Result};

/// A confining potential with analytic derivatives.
pub trait Potential: Send + Sync + Debug {
    fn value(&self, x: Point) -> f64;
    fn gradient(&self, x: Point) -> [f64; 2];
    fn laplacian(&self, x: Point) -> f64;
    /// `liminf V(x) / (2 log|x|) - 1` as `|x| -> infinity`.
    fn growth_margin(&self) -> f64;
    /// Centre of rotational symmetry, if `V` depends only on `|x - c|`.
    fn radial_center(&self) -> Option<Point> {
        None
    }
    fn describe(&self) -> String;
}

/// Serializable description of the built-in potentials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialSpec {
    /// `a |x|^2`
    Quadratic { a: f64 },
    /// `a |x|^4`
    Quartic { a: f64 },
    /// `|x|^2 + eps * exp(1 - 1/(1 - |x - c|^2/r^2))`
    QuadraticBump { eps: f64, center: Point, radius: f64 },
    /// `sum c * x^p * y^q` over `(p, q, c)` terms.
    Polynomial { terms: Vec<(u32, u32, f64)> },
}

impl PotentialSpec {
    pub fn build(&self) -> Result<Arc<dyn Potential>> {
        Ok(match self {
            PotentialSpec::Quadratic { a } => {
                if *a <= 0.0 {
                    return Err(Error::InvalidInput("quadratic coefficient must be positive".into()));
                }
                Arc::new(Quadratic { a: *a })
            }
            PotentialSpec::Quartic { a } => {
                if *a <= 0.0 {
                    return Err(Error::InvalidInput("quartic coefficient must be positive".into()));
                }
                Arc::new(Quartic { a: *a })
            }
            PotentialSpec::QuadraticBump { eps, center, radius } => {
                if *radius <= 0.0 {
                    return Err(Error::InvalidInput("bump radius must be positive".into()));
                }
                Arc::new(QuadraticBump { eps: *eps, center: *center, radius: *radius })
            }
            PotentialSpec::Polynomial { terms } => {
                let p = Polynomial { terms: terms.clone() };
                if p.growth_margin() <= 0.0 {
                    return Err(Error::Assumption("polynomial potential does not dominate 2 log|x|".into()));
                }
                Arc::new(p)
            }
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Quadratic {
    pub a: f64,
}

impl Potential for Quadratic {
    fn value(&self, x: Point) -> f64 {
        self.a * (x[0] * x[0] + x[1] * x[1])
    }
    fn gradient(&self, x: Point) -> [f64; 2] {
        [2.0 * self.a * x[0], 2.0 * self.a * x[1]]
    }
    fn laplacian(&self, _x: Point) -> f64 {
        4.0 * self.a
    }
    fn growth_margin(&self) -> f64 {
        f64::INFINITY
    }
    fn radial_center(&self) -> Option<Point> {
        Some([0.0, 0.0])
    }
    fn describe(&self) -> String {
        format!("{}|x|^2", self.a)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Quartic {
    pub a: f64,
}

impl Potential for Quartic {
    fn value(&self, x: Point) -> f64 {
        let r2 = x[0] * x[0] + x[1] * x[1];
        self.a * r2 * r2
    }
    fn gradient(&self, x: Point) -> [f64; 2] {
        let r2 = x[0] * x[0] + x[1] * x[1];
        [4.0 * self.a * r2 * x[0], 4.0 * self.a * r2 * x[1]]
    }
    fn laplacian(&self, x: Point) -> f64 {
        16.0 * self.a * (x[0] * x[0] + x[1] * x[1])
    }
    fn growth_margin(&self) -> f64 {
        f64::INFINITY
    }
    fn radial_center(&self) -> Option<Point> {
        Some([0.0, 0.0])
    }
    fn describe(&self) -> String {
        format!("{}|x|^4", self.a)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QuadraticBump {
    pub eps: f64,
    pub center: Point,
    pub radius: f64,
}

impl QuadraticBump {
    fn bump(&self) -> TestFunction {
        TestFunction::bump(self.center, self.radius, self.eps)
    }
}

impl Potential for QuadraticBump {
    fn value(&self, x: Point) -> f64 {
        x[0] * x[0] + x[1] * x[1] + self.bump().value(x)
    }
    fn gradient(&self, x: Point) -> [f64; 2] {
        let b = self.bump().gradient(x);
        [2.0 * x[0] + b[0], 2.0 * x[1] + b[1]]
    }
    fn laplacian(&self, x: Point) -> f64 {
        4.0 + self.bump().laplacian(x)
    }
    fn growth_margin(&self) -> f64 {
        f64::INFINITY
    }
    fn radial_center(&self) -> Option<Point> {
        (self.eps == 0.0 || (self.center == [0.0, 0.0])).then_some([0.0, 0.0])
    }
    fn describe(&self) -> String {
        format!("|x|^2 + {} bump({:?}, {})", self.eps, self.center, self.radius)
    }
}

#[derive(Clone, Debug)]
pub struct Polynomial {
    pub terms: Vec<(u32, u32, f64)>,
}

fn powi(x: f64, p: u32) -> f64 {
    x.powi(p as i32)
}

impl Potential for Polynomial {
    fn value(&self, x: Point) -> f64 {
        self.terms.iter().map(|&(p, q, c)| c * powi(x[0], p) * powi(x[1], q)).sum()
    }
    fn gradient(&self, x: Point) -> [f64; 2] {
        let mut g = [0.0; 2];
        for &(p, q, c) in &self.terms {
            if p > 0 {
                g[0] += c * p as f64 * powi(x[0], p - 1) * powi(x[1], q);
            }
            if q > 0 {
                g[1] += c * q as f64 * powi(x[0], p) * powi(x[1], q - 1);
            }
        }
        g
    }
    fn laplacian(&self, x: Point) -> f64 {
        let mut s = 0.0;
        for &(p, q, c) in &self.terms {
            if p > 1 {
                s += c * (p * (p - 1)) as f64 * powi(x[0], p - 2) * powi(x[1], q);
            }
            if q > 1 {
                s += c * (q * (q - 1)) as f64 * powi(x[0], p) * powi(x[1], q - 2);
            }
        }
        s
    }
    /// Positive (infinite) when the top-degree part is positive on the unit
    /// circle, sampled at 720 directions; `-1` otherwise.
    fn growth_margin(&self) -> f64 {
        let deg = self.terms.iter().map(|&(p, q, _)| p + q).max().unwrap_or(0);
        if deg == 0 {
            return -1.0;
        }
        let ok = (0..720).all(|s| {
            let t = s as f64 * std::f64::consts::PI / 360.0;
            let (c, sn) = (t.cos(), t.sin());
            self.terms.iter().filter(|&&(p, q, _)| p + q == deg).map(|&(p, q, k)| k * powi(c, p) * powi(sn, q)).sum::<f64>() > 0.0
        });
        if ok {
            f64::INFINITY
        } else {
            -1.0
        }
    }
    fn describe(&self) -> String {
        format!("polynomial {:?}", self.terms)
    }
}

/// `V - 2 t xi / beta`: the tilted potential of the perturbed equilibrium.
#[derive(Debug, Clone)]
pub struct Tilted {
    pub base: Arc<dyn Potential>,
    pub xi: TestFunction,
    /// Coefficient `2 t / beta`.
    pub coeff: f64,
}

impl Potential for Tilted {
    fn value(&self, x: Point) -> f64 {
        self.base.value(x) - self.coeff * self.xi.value(x)
    }
    fn gradient(&self, x: Point) -> [f64; 2] {
        let a = self.base.gradient(x);
        let b = self.xi.gradient(x);
        [a[0] - self.coeff * b[0], a[1] - self.coeff * b[1]]
    }
    fn laplacian(&self, x: Point) -> f64 {
        self.base.laplacian(x) - self.coeff * self.xi.laplacian(x)
    }
    fn growth_margin(&self) -> f64 {
        self.base.growth_margin()
    }
    fn radial_center(&self) -> Option<Point> {
        None
    }
    fn describe(&self) -> String {
        format!("{} - {} xi", self.base.describe(), self.coeff)
    }
}

/// Checks the growth condition `V(x) / (2 log|x|) >= 1 + margin/2` on a circle.
pub fn growth_check(v: &dyn Potential, radius: f64) -> bool {
    if radius <= 1.0 {
        return false;
    }
    let m = v.growth_margin();
    let need = if m.is_finite() { 1.0 + m / 2.0 } else { 1.0 };
    (0..256).all(|s| {
        let t = s as f64 * std::f64::consts::PI / 128.0;
        v.value([radius * t.cos(), radius * t.sin()]) / (2.0 * radius.ln()) >= need
    })
}

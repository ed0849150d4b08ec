//! Numerical laboratory for two-dimensional Coulomb gases.
//!
//! The crate is organised bottom-up: [`field`] holds grids, quadrature and
//! logarithmic potentials; [`equilibrium`] computes the equilibrium measure of
//! a confining potential; [`energy`] evaluates the Hamiltonian and the
//! next-order energy together with its exact identities; [`sampler`] draws
//! configurations; [`fluctuations`] turns configurations into linear statistics
//! and compares them with the Gaussian limit; [`transport`] builds the
//! transport maps and the anisotropy functional.

pub mod energy;
pub mod equilibrium;
pub mod error;
pub mod field;
pub mod fluctuations;
pub mod potential;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod test_function;
pub mod transport;

pub use error::{Error, Result};

/// A point of the plane.
pub type Point = [f64; 2];

#[inline]
pub(crate) fn dist2(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
pub(crate) fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

//! Uniform-grid fields, quadrature, logarithmic potentials, the discrete
//! Laplacian, harmonic extension and Dirichlet energies.

pub mod grid;
pub mod harmonic;
pub mod io;
pub mod logpot;
pub mod ops;

pub use grid::{CutBoundary, Grid2D, LevelSet, Mask, Measure2D, ScalarField2D, VectorField2D};
pub use harmonic::{harmonic_extension, neumann_jump, HarmonicExtension, HarmonicOptions, JumpSample, Region};
pub use logpot::{log_potential, log_potential_direct, log_potential_fft, potential_at, LogConvolver};
pub use ops::{dirichlet_energy, discrete_laplacian, gradient, quadrature};

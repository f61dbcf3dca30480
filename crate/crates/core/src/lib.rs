//! Spectral Galerkin machinery for the incompressible Navier-Stokes
//! equations: basis families and transforms, diagonalized Helmholtz/Poisson
//! algebra, a rotational pressure-correction reference solver,
//! coefficient-predicting operator networks trained on weak-form residuals,
//! input generators, and ensemble statistics.

pub mod basis;
pub mod galerkin;
pub mod nse_solver;
pub mod operator_net;
pub mod problems;
pub mod trainer;
pub mod error;
pub mod rng;

pub use basis::{BasisKind, BasisSpec, BasisTables, Coeffs, QuadratureRule, SpectralField};
pub use error::Error;

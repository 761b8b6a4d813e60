//! Multiscale finite elements for the coupled non-stationary Stokes-Darcy
//! problem with a rapidly oscillating permeability.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the
//! experiment harness works in `f64`.

pub mod experiments;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod msfem;
pub mod scalar;
pub mod solver;

pub use scalar::Real;

pub type Mesh64 = mesh::Mesh<f64>;
pub type Mesh32 = mesh::Mesh<f32>;
pub type SparseMatrix64 = linalg::SparseMatrix<f64>;
pub type SparseMatrix32 = linalg::SparseMatrix<f32>;

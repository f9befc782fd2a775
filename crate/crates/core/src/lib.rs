//! Numerical laboratory for 2D stochastic second-grade fluids with transport
//! and additive noise under no-slip walls: spectral Galerkin integration in
//! the W-basis, a vorticity formulation on the grid, an Euler reference
//! solver and a reproducible experiment harness.

pub mod additive;
pub mod band;
pub mod config;
pub mod error;
pub mod grid;
pub mod manifest;
pub mod euler;
pub mod experiments;
pub mod galerkin;
pub mod operators;
pub mod scalar;
pub mod stokes;
pub mod suite;

pub use error::{Result, SgfError};
pub use scalar::Scalar;

/// Concrete `f64` aliases; the experiment harness runs on these.
pub type Grid64 = grid::Grid<f64>;
pub type Field64 = grid::ScalarField<f64>;
pub type Vector64 = grid::VectorField<f64>;
pub type StokesSolver64 = stokes::StokesSolver<f64>;
pub type StokesBasis64 = stokes::StokesEigenbasis<f64>;
pub type WBasis64 = stokes::WEigenbasis<f64>;

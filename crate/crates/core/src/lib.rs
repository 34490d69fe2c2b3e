//! Numerical laboratory for coercivity of nonlocal quadratic forms.
//!
//! Kernels are tabulated on uniform grids; the crate builds the auxiliary
//! diffused kernels, tracks their nondegeneracy sets, and compares the
//! resulting constructive lower bounds with Rayleigh-quotient minima against
//! the Gagliardo seminorm.

pub mod coercivity;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod inkspots;
pub mod forms;
pub mod geometry;
pub mod kernels;

pub use error::{Error, Result};
pub use grid::{Ball, Grid, GridFunction};
pub use kernels::{KernelSpec, KernelVariant, TabulatedKernel};

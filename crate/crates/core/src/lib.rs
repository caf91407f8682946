//! Periodic-cell homogenization of reactive transport with surface
//! adsorption: cell problems, effective dispersion and the upscaled
//! nonlinear diffusion equation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cell;
pub mod dispersion;
pub mod error;
pub mod fem;
pub mod isotherm;
pub mod macro_solver;
pub mod mesh;
pub mod study;
pub mod velocity;

pub use error::{Error, Result};

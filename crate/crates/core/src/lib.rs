//! Forward and inverse solvers for the fractional Schrödinger equation with a
//! local nonlinear perturbation on a periodic grid.

pub mod dn_map;
pub mod error;
pub mod grid;
pub mod linear_solver;
pub mod linearization;
pub mod multi_index;
pub mod nonlinear_solver;
pub mod operators;
pub mod runge;
pub mod recovery;
pub mod spectral;

pub use error::{Error, Result};
pub use grid::{build_grid, inner_product, sobolev_norm, Field, GridSpec, MaskKind, Region, RegionSpec};
pub use multi_index::MultiIndex;
pub use operators::{
    apply_pk, bilinear_form, eval_nonlinearity, frac_laplacian, linear_form, partial_derivative, DerivativeScheme,
    FracParams, Nonlinearity,
};

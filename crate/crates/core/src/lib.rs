//! Finite-dimensional product systems of W*-bimodules, their units, and the
//! dilations and cocycle classification of CP₀- and E₀-semigroups.
//!
//! Every construction is carried out in orthonormal coordinates and comes with
//! a verification routine that returns numerical defects.

pub mod algebra;
pub mod bimodule;
pub mod cli;
pub mod classify;
pub mod cpdyn;
pub mod dilation;
pub mod error;
pub mod heatmarkov;
pub mod linalg;
pub mod prodsys;

pub use error::{Error, Result};

/// Exact time values and partition parts.
pub type Rational = num_rational::Ratio<i64>;

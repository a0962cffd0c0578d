//! Numerical laboratory for the ionic Vlasov-Poisson-Boltzmann system and its
//! compressible Euler-Poisson limit.

pub mod collision;
pub mod error;
pub mod fields;
pub mod fluid;
pub mod hilbert;
pub mod kinetic;
pub mod macro_micro;
pub mod phase_grid;

pub use error::{Error, Result};

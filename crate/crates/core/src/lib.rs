//! Numerical laboratory for stochastic-variational quantization of charged
//! particles coupled to a lattice Coulomb-gauge field, the quantum-classical
//! hybrid obtained by classicalizing the particles, and the geometric phase
//! the particle loops induce in the field wavefunctional.

pub mod cli;
pub mod error;
pub mod geomphase;
pub mod hybrid;
pub mod lattice;
pub mod quantum;
pub mod sde;

pub use error::{Error, Result};

//! Continuous-time dynamic discrete games: equilibrium computation,
//! simulation, nested pseudo-likelihood estimation and convergence
//! diagnostics.

pub mod diagnostics;
pub mod equilibrium;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod kernels;
pub mod likelihood;
pub mod optimize;
pub mod simulate;
pub mod state_model;

pub use error::{Error, Result};

//! Wide-network / NTK-GP correspondence lab.
//!
//! Finite-width MLPs under NTK and standard parametrizations, empirical NTK
//! and NNGP kernels, regularized training whose wide-network limit is the
//! NTK-GP posterior mean with observation noise, shifted networks for
//! arbitrary prior means, and an experiment harness for width-convergence
//! and transfer experiments.

pub mod data;
pub mod error;
pub mod exp;
pub mod kernel;
pub mod lin;
pub mod linalg;
pub mod net;
pub mod rng;
pub mod train;

pub use error::{Error, Result};

//! Kronecker-factored natural gradient for dense, convolution and recurrent
//! networks, with exact dense oracles and an affine reparameterization
//! engine for checking that updates commute with changes of basis.

pub mod error;
pub mod harness;
pub mod kfac;
pub mod linalg;
pub mod metrics;
pub mod nets;
pub mod par;
pub mod reparam;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use linalg::Matrix;

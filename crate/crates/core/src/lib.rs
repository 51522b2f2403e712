//! Multi-fidelity autoregressive Gaussian process regression on a learned
//! orthonormal linear embedding of the input space.

pub mod argp;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod samplers;
pub mod stiefel;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
mod kernels;
pub mod corpus;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod netblocks;
pub mod optim;
pub mod params;
mod real;
pub mod tape;
pub mod train;
mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;

/// Mel-cepstral coefficients per frame.
pub const FEATURE_DIM: usize = 36;

//! Batch normalization variants built for small batches, with the tensor
//! kernels, statistics, training loop, and checks needed to study them.

pub mod error;
pub mod fold;
pub mod gradcheck;
pub mod io;
pub mod norm;
pub mod ops;
pub mod stats;
pub mod tensor;
pub mod theorem;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};

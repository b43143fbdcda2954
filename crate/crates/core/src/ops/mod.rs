//! Non-normalization layers with hand-written backward passes.
//!
//! Every forward returns a [`LayerGradPair`]: the output plus a pullback
//! holding whatever backward needs. Pullbacks are consumed by `backward`, so
//! each forward can be differentiated at most once.

mod activation;
mod affine;
mod conv;
mod loss;

pub use activation::{global_avg_pool, relu, PoolPullback, ReluPullback};
pub use affine::{affine, AffineGrads, AffinePullback};
pub use conv::{conv2d, conv2d_infer, Conv2dGrads, Conv2dPullback, ConvGeometry};
pub use loss::softmax_cross_entropy;

use crate::tensor::Tensor;

#[derive(Debug)]
pub struct LayerGradPair<T, P> {
    pub output: Tensor<T>,
    pub pullback: P,
}

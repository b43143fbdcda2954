use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Subtract each output channel's mean from its kernel slice.
///
/// The mean is taken over every axis except the first.
pub fn weight_centralize<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let rows = *w
        .shape()
        .first()
        .ok_or_else(|| Error::shape("weight_centralize", "scalar weight"))?;
    let per_row = w.len() / rows;
    let mut out = w.clone();
    for row in out.data_mut().chunks_mut(per_row) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / per_row as f64;
        let mean = T::from_f64(mean);
        for v in row {
            *v = *v - mean;
        }
    }
    Ok(out)
}

/// Pull a gradient back through [`weight_centralize`]. The map is a linear
/// projection, so its adjoint is the same projection.
pub fn centralize_backward<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    weight_centralize(grad)
}

/// Raw kernel whose centralized version is what the convolution sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentralizedConvWeights<T> {
    pub raw: Tensor<T>,
}

impl<T: Scalar> CentralizedConvWeights<T> {
    pub fn new(raw: Tensor<T>) -> Self {
        Self { raw }
    }

    pub fn effective(&self) -> Result<Tensor<T>> {
        weight_centralize(&self.raw)
    }
}

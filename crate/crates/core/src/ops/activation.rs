use crate::error::{Error, Result};
use crate::ops::LayerGradPair;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug)]
pub struct ReluPullback {
    mask: Vec<bool>,
    shape: Vec<usize>,
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> LayerGradPair<T, ReluPullback> {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::ZERO).collect();
    let output = x.map(|v| if v > T::ZERO { v } else { T::ZERO });
    LayerGradPair {
        output,
        pullback: ReluPullback {
            mask,
            shape: x.shape().to_vec(),
        },
    }
}

impl ReluPullback {
    pub fn backward<T: Scalar>(self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.shape() != self.shape {
            return Err(Error::shape(
                "relu backward",
                format!("{:?} vs {:?}", dy.shape(), self.shape),
            ));
        }
        let data = dy
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&g, &on)| if on { g } else { T::ZERO })
            .collect();
        Tensor::new(self.shape, data)
    }
}

#[derive(Debug)]
pub struct PoolPullback {
    shape: Vec<usize>,
}

/// Mean over all spatial positions: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<LayerGradPair<T, PoolPullback>> {
    let [n, c, h, w] = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|s| s.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(LayerGradPair {
        output: Tensor::new(vec![n, c], data)?,
        pullback: PoolPullback {
            shape: x.shape().to_vec(),
        },
    })
}

impl PoolPullback {
    pub fn backward<T: Scalar>(self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, plane) = (self.shape[0], self.shape[1], self.shape[2] * self.shape[3]);
        if dy.shape() != [n, c] {
            return Err(Error::shape(
                "global_avg_pool backward",
                format!("gradient {:?} vs [{n}, {c}]", dy.shape()),
            ));
        }
        let inv = T::from_f64(1.0 / plane as f64);
        let mut data = Vec::with_capacity(n * c * plane);
        for &g in dy.data() {
            data.extend(std::iter::repeat_n(g * inv, plane));
        }
        Tensor::new(self.shape, data)
    }
}

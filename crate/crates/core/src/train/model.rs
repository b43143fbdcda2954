use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fold::{fold, ConvUnit, Normalizer};
use crate::norm::{centralize_backward, weight_centralize, NormLayer, NormVariantConfig};
use crate::ops::{
    affine, conv2d, conv2d_infer, global_avg_pool, relu, AffinePullback, Conv2dPullback, PoolPullback, ReluPullback,
};
use crate::tensor::{Scalar, Tensor};
use crate::train::config::ModelSpec;

const KERNEL: usize = 3;
const PAD: usize = 1;

/// Conv stages (3x3, padding 1), each followed by a normalization layer and
/// ReLU, then global average pooling and an affine classifier.
#[derive(Debug, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ConvNet<T> {
    strides: Vec<usize>,
    kernels: Vec<Tensor<T>>,
    norms: Vec<NormLayer<T>>,
    head_w: Tensor<T>,
    head_b: Tensor<T>,
    centralize: bool,
}

/// Everything the backward pass needs from one training forward.
#[derive(Debug)]
pub struct Tape<T> {
    convs: Vec<Conv2dPullback<T>>,
    relus: Vec<ReluPullback>,
    pool: PoolPullback,
    head: AffinePullback<T>,
}

#[derive(Debug)]
pub struct ConvNetGrads<T> {
    pub kernels: Vec<Tensor<T>>,
    pub gamma: Vec<Vec<T>>,
    pub beta: Vec<Vec<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> ConvNetGrads<T> {
    /// Flat views in the same order as [`ConvNet::params_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for i in 0..self.kernels.len() {
            out.push(self.kernels[i].data());
            out.push(&self.gamma[i][..]);
            out.push(&self.beta[i][..]);
        }
        out.push(self.head_w.data());
        out.push(self.head_b.data());
        out
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// How inference treats each normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferMode {
    /// Convolution, then the finalized per-channel map.
    Separate,
    /// The finalized map absorbed into convolution weights and bias.
    Folded,
}

impl<T: Scalar> ConvNet<T> {
    /// He-initialized kernels, unit `gamma`, zero `beta`.
    pub fn new<R: Rng + ?Sized>(
        spec: &ModelSpec,
        norm: &NormVariantConfig,
        in_channels: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut kernels = Vec::with_capacity(spec.widths.len());
        let mut norms = Vec::with_capacity(spec.widths.len());
        let mut ci = in_channels;
        for &co in &spec.widths {
            let std = (2.0 / (ci * KERNEL * KERNEL) as f64).sqrt();
            kernels.push(Tensor::random_normal(&[co, ci, KERNEL, KERNEL], std, rng));
            norms.push(NormLayer::new(norm.clone(), co)?);
            ci = co;
        }
        let head_w = Tensor::random_normal(&[classes, ci], (1.0 / ci as f64).sqrt(), rng);
        Ok(Self {
            strides: spec.strides.clone(),
            kernels,
            norms,
            head_w,
            head_b: Tensor::zeros(&[classes]),
            centralize: norm.centralize_weights,
        })
    }

    pub fn depth(&self) -> usize {
        self.kernels.len()
    }

    pub fn norms(&self) -> &[NormLayer<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormLayer<T>] {
        &mut self.norms
    }

    fn effective_kernel(&self, i: usize) -> Result<Tensor<T>> {
        if self.centralize {
            weight_centralize(&self.kernels[i])
        } else {
            Ok(self.kernels[i].clone())
        }
    }

    /// Training-mode forward; normalization statistics come from groups of
    /// `group_size` consecutive samples.
    pub fn forward(&mut self, x: &Tensor<T>, group_size: usize) -> Result<(Tensor<T>, Tape<T>)> {
        let mut convs = Vec::with_capacity(self.depth());
        let mut relus = Vec::with_capacity(self.depth());
        let mut h = x.clone();
        for i in 0..self.depth() {
            let w = self.effective_kernel(i)?;
            let c = conv2d(&h, &w, self.strides[i], PAD)?;
            let z = self.norms[i].forward(&c.output, group_size)?;
            let r = relu(&z);
            convs.push(c.pullback);
            relus.push(r.pullback);
            h = r.output;
        }
        let pooled = global_avg_pool(&h)?;
        let head = affine(&pooled.output, &self.head_w, &self.head_b)?;
        Ok((
            head.output,
            Tape {
                convs,
                relus,
                pool: pooled.pullback,
                head: head.pullback,
            },
        ))
    }

    pub fn backward(&mut self, tape: Tape<T>, dlogits: &Tensor<T>) -> Result<ConvNetGrads<T>> {
        let head = tape.head.backward(dlogits)?;
        let mut dh = tape.pool.backward(&head.dx)?;
        let depth = self.depth();
        let mut kernels = vec![None; depth];
        let mut gamma = vec![Vec::new(); depth];
        let mut beta = vec![Vec::new(); depth];
        for (i, (conv, relu)) in tape.convs.into_iter().zip(tape.relus).enumerate().rev() {
            let dz = relu.backward(&dh)?;
            let n = self.norms[i].backward(&dz)?;
            let c = conv.backward(&n.dx)?;
            kernels[i] = Some(if self.centralize {
                centralize_backward(&c.dw)?
            } else {
                c.dw
            });
            gamma[i] = n.dgamma;
            beta[i] = n.dbeta;
            dh = c.dx;
        }
        Ok(ConvNetGrads {
            kernels: kernels.into_iter().map(|k| k.expect("every stage visited")).collect(),
            gamma,
            beta,
            head_w: head.dw,
            head_b: head.db,
        })
    }

    /// Mutable flat views of every trainable parameter.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for (k, n) in self.kernels.iter_mut().zip(self.norms.iter_mut()) {
            out.push(k.data_mut());
            let (g, b) = n.gamma_beta_mut();
            out.push(g);
            out.push(b);
        }
        out.push(self.head_w.data_mut());
        out.push(self.head_b.data_mut());
        out
    }

    /// Logits from the inference path (EMA statistics only).
    pub fn infer(&self, x: &Tensor<T>, mode: InferMode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for i in 0..self.depth() {
            let w = self.effective_kernel(i)?;
            let finalized = self.norms[i].finalize_for_inference()?;
            let mut z = match mode {
                InferMode::Separate => {
                    let mut c = conv2d_infer(&h, &w, None, self.strides[i], PAD)?;
                    finalized.apply_in_place(&mut c)?;
                    c
                }
                InferMode::Folded => {
                    let unit = ConvUnit {
                        weights: w,
                        bias: None,
                        stride: self.strides[i],
                        pad: PAD,
                    };
                    fold(&unit, &Normalizer::Linear(finalized))?.forward(&h)?
                }
            };
            for v in z.data_mut() {
                *v = if *v > T::ZERO { *v } else { T::ZERO };
            }
            h = z;
        }
        let pooled = global_avg_pool(&h)?.output;
        Ok(affine(&pooled, &self.head_w, &self.head_b)?.output)
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, _, _] = x.dims4("conv net")?;
        if c != self.kernels[0].shape()[1] {
            return Err(Error::shape(
                "conv net",
                format!("{c} input channels, model expects {}", self.kernels[0].shape()[1]),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::softmax_cross_entropy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(norm: NormVariantConfig) -> ConvNet<f64> {
        let spec = ModelSpec {
            widths: vec![3, 4],
            strides: vec![1, 2],
        };
        ConvNet::new(&spec, &norm, 1, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn loss(net: &mut ConvNet<f64>, x: &Tensor<f64>, labels: &[usize], group: usize) -> f64 {
        let (logits, tape) = net.forward(x, group).unwrap();
        drop(tape);
        softmax_cross_entropy(&logits, labels).unwrap().0
    }

    #[test]
    fn kernel_gradient_matches_finite_difference() {
        let modified = NormVariantConfig {
            form: crate::norm::NormForm::Modified,
            centralize_weights: true,
            ..NormVariantConfig::bn()
        };
        for norm in [NormVariantConfig::bn(), modified] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = Tensor::<f64>::random_normal(&[4, 1, 6, 6], 1.0, &mut rng);
            let labels = [0, 1, 2, 1];
            let mut net = tiny(norm.clone());
            for layer in net.norms_mut() {
                layer.set_frozen(true);
            }
            let (logits, tape) = net.forward(&x, 2).unwrap();
            let (_, dl) = softmax_cross_entropy(&logits, &labels).unwrap();
            let grads = net.backward(tape, &dl).unwrap();
            let h = 1e-6;
            for idx in [0usize, 7, 20] {
                let base = net.kernels[1].data()[idx];
                net.kernels[1].data_mut()[idx] = base + h;
                let up = loss(&mut net, &x, &labels, 2);
                net.kernels[1].data_mut()[idx] = base - h;
                let down = loss(&mut net, &x, &labels, 2);
                net.kernels[1].data_mut()[idx] = base;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.kernels[1].data()[idx];
                assert!(
                    (numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs()),
                    "{}: {numeric} vs {analytic}",
                    norm.label()
                );
            }
        }
    }

    #[test]
    fn folded_inference_matches_separate() {
        let mut net = tiny(NormVariantConfig::bn());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x = Tensor::<f64>::random_normal(&[4, 1, 6, 6], 1.0, &mut rng);
            net.forward(&x, 4).unwrap();
        }
        let x = Tensor::<f64>::random_normal(&[3, 1, 6, 6], 1.0, &mut rng);
        let a = net.infer(&x, InferMode::Separate).unwrap();
        let b = net.infer(&x, InferMode::Folded).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}

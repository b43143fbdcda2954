use crate::error::{Error, Result};
use crate::ops::LayerGradPair;
use crate::tensor::{Scalar, Tensor};

/// Resolved extents of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[co, ci, kh, kw]) = (x_shape, w_shape) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected x [B,C,H,W] and w [Co,C,kh,kw], got {x_shape:?} and {w_shape:?}"),
            ));
        };
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but kernel expects {ci}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} does not fit padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Rows of the unfolded input: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.co, self.ho, self.wo]
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x` into a `[C*kh*kw, N*Ho*Wo]` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let plane = g.out_plane();
    let cols_n = g.n * plane;
    let mut cols = vec![T::ZERO; g.patch_len() * cols_n];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.n {
                    let src = &x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an input-shaped buffer.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let plane = g.out_plane();
    let cols_n = g.n * plane;
    let mut x = vec![T::ZERO; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.n {
                    let dst = &mut x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[Co, N*P]` (GEMM layout) to `[N, Co, P]` (NCHW).
fn cols_to_nchw<T: Scalar>(y: &[T], g: &ConvGeometry) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::ZERO; y.len()];
    for co in 0..g.co {
        for b in 0..g.n {
            let src = &y[co * g.n * plane + b * plane..co * g.n * plane + (b + 1) * plane];
            out[(b * g.co + co) * plane..(b * g.co + co + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

fn nchw_to_cols<T: Scalar>(y: &[T], g: &ConvGeometry) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::ZERO; y.len()];
    for co in 0..g.co {
        for b in 0..g.n {
            out[co * g.n * plane + b * plane..co * g.n * plane + (b + 1) * plane]
                .copy_from_slice(&y[(b * g.co + co) * plane..(b * g.co + co + 1) * plane]);
        }
    }
    out
}

fn unfold<T: Scalar>(x: &Tensor<T>, g: &ConvGeometry) -> Vec<T> {
    if g.is_pointwise() {
        // [N, C, P] -> [C, N*P] is the same gather as the output reshuffle.
        let swapped = ConvGeometry { co: g.c, ..*g };
        nchw_to_cols(x.data(), &swapped)
    } else {
        im2col(x.data(), g)
    }
}

#[derive(Debug)]
pub struct Conv2dPullback<T> {
    geometry: ConvGeometry,
    weight: Tensor<T>,
    cols: Vec<T>,
}

#[derive(Debug)]
pub struct Conv2dGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
}

/// Cross-correlation of `x: [B,C,H,W]` with `w: [Co,C,kh,kw]`, no bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<LayerGradPair<T, Conv2dPullback<T>>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let cols = unfold(x, &g);
    let cols_n = g.n * g.out_plane();
    let mut y = vec![T::ZERO; g.co * cols_n];
    T::gemm(
        g.co,
        g.patch_len(),
        cols_n,
        w.data(),
        false,
        &cols,
        false,
        T::ZERO,
        &mut y,
    );
    let output = Tensor::new(g.output_shape().to_vec(), cols_to_nchw(&y, &g))?;
    Ok(LayerGradPair {
        output,
        pullback: Conv2dPullback {
            geometry: g,
            weight: w.clone(),
            cols,
        },
    })
}

impl<T: Scalar> Conv2dPullback<T> {
    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn backward(self, dy: &Tensor<T>) -> Result<Conv2dGrads<T>> {
        let g = self.geometry;
        if dy.shape() != g.output_shape() {
            return Err(Error::shape(
                "conv2d backward",
                format!("gradient {:?} vs output {:?}", dy.shape(), g.output_shape()),
            ));
        }
        let cols_n = g.n * g.out_plane();
        let k = g.patch_len();
        let dy_cols = nchw_to_cols(dy.data(), &g);

        let mut dw = vec![T::ZERO; g.co * k];
        T::gemm(g.co, cols_n, k, &dy_cols, false, &self.cols, true, T::ZERO, &mut dw);

        let mut dcols = vec![T::ZERO; k * cols_n];
        T::gemm(
            k,
            g.co,
            cols_n,
            self.weight.data(),
            true,
            &dy_cols,
            false,
            T::ZERO,
            &mut dcols,
        );
        let dx = if g.is_pointwise() {
            let swapped = ConvGeometry { co: g.c, ..g };
            cols_to_nchw(&dcols, &swapped)
        } else {
            col2im(&dcols, &g)
        };

        Ok(Conv2dGrads {
            dx: Tensor::new(vec![g.n, g.c, g.h, g.w], dx)?,
            dw: Tensor::new(self.weight.shape().to_vec(), dw)?,
        })
    }
}

/// Inference-only convolution with an optional per-output-channel bias.
pub fn conv2d_infer<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![T::ZERO; g.n * g.co * plane];
    if let Some(b) = bias {
        if b.len() != g.co {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.len(), g.co),
            ));
        }
    }
    // Per sample the GEMM writes straight into the NCHW output slab.
    for n in 0..g.n {
        let one = ConvGeometry { n: 1, ..g };
        let xs = &x.data()[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let dst = &mut out[n * g.co * plane..(n + 1) * g.co * plane];
        let beta = match bias {
            Some(b) => {
                for (co, row) in dst.chunks_mut(plane).enumerate() {
                    row.fill(b[co]);
                }
                T::ONE
            }
            None => T::ZERO,
        };
        if one.is_pointwise() {
            T::gemm(g.co, k, plane, w.data(), false, xs, false, beta, dst);
        } else {
            let cols = im2col(xs, &one);
            T::gemm(g.co, k, plane, w.data(), false, &cols, false, beta, dst);
        }
    }
    Tensor::new(g.output_shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct summation reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad).unwrap();
        let mut out = Tensor::zeros(&g.output_shape());
        for b in 0..g.n {
            for co in 0..g.co {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..g.c {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * g.c + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * w.data()[((co * g.c + ci) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out.data_mut()[((b * g.co + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_pointwise_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::random_normal(&[2, 3, 4, 5], 1.0, &mut rng);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, 1, 0).unwrap().output;
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_zero_output_and_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::random_normal(&[2, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let pair = conv2d(&x, &w, 1, 1).unwrap();
        assert!(pair.output.data().iter().all(|&v| v == 0.0));
        let dy = Tensor::random_normal(pair.output.shape(), 1.0, &mut rng);
        let grads = pair.pullback.backward(&dy).unwrap();
        assert!(grads.dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_kernel_on_ones_input_sums_to_nine() {
        let x = Tensor::<f64>::full(&[1, 1, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, 1, 0).unwrap().output;
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 5]), 1, 0).is_err());
        assert!(conv2d(&Tensor::<f64>::zeros(&[2, 4]), &Tensor::zeros(&[1, 2, 1, 1]), 1, 0).is_err());
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1)] {
            let x = Tensor::<f64>::random_normal(&[3, 2, 7, 6], 1.0, &mut rng);
            let w = Tensor::random_normal(&[4, 2, k, k], 1.0, &mut rng);
            let y = conv2d(&x, &w, stride, pad).unwrap().output;
            let want = naive_conv(&x, &w, stride, pad);
            assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
            let y2 = conv2d_infer(&x, &w, None, stride, pad).unwrap();
            assert!(y2.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn bias_is_added_per_output_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::random_normal(&[2, 2, 4, 4], 1.0, &mut rng);
        let w = Tensor::random_normal(&[3, 2, 3, 3], 1.0, &mut rng);
        let b = [0.5, -1.0, 2.0];
        let y = conv2d_infer(&x, &w, Some(&b), 1, 1).unwrap();
        let y0 = naive_conv(&x, &w, 1, 1);
        for (i, (a, c)) in y.data().iter().zip(y0.data()).enumerate() {
            let co = (i / 16) % 3;
            assert!((a - c - b[co]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Tensor::<f64>::random_normal(&[2, 2, 5, 4], 1.0, &mut rng);
            let w = Tensor::random_normal(&[3, 2, 3, 3], 1.0, &mut rng);
            let r = Tensor::random_normal(&[2, 3, 3, 2], 1.0, &mut rng);
            let loss_x = |x: &Tensor<f64>| {
                let pair = conv2d(x, &w, 2, 1)?;
                let v = pair.output.dot(&r)?;
                Ok((v, pair.pullback.backward(&r)?.dx))
            };
            assert!(gradcheck(loss_x, &x, 1e-5).unwrap().max_rel_error < 1e-6);
            let loss_w = |w: &Tensor<f64>| {
                let pair = conv2d(&x, w, 2, 1)?;
                let v = pair.output.dot(&r)?;
                Ok((v, pair.pullback.backward(&r)?.dw))
            };
            assert!(gradcheck(loss_w, &w, 1e-5).unwrap().max_rel_error < 1e-6);
        }
    }
}

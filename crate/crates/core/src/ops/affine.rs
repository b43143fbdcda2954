use crate::error::{Error, Result};
use crate::ops::LayerGradPair;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug)]
pub struct AffinePullback<T> {
    x: Tensor<T>,
    w: Tensor<T>,
}

#[derive(Debug)]
pub struct AffineGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// `y = x w^T + b` for `x: [B,p]`, `w: [q,p]`, `b: [q]`.
pub fn affine<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<LayerGradPair<T, AffinePullback<T>>> {
    let [batch, p] = x.dims2("affine")?;
    let [q, pw] = w.dims2("affine")?;
    if p != pw || b.shape() != [q] {
        return Err(Error::shape(
            "affine",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut y = Vec::with_capacity(batch * q);
    for _ in 0..batch {
        y.extend_from_slice(b.data());
    }
    T::gemm(batch, p, q, x.data(), false, w.data(), true, T::ONE, &mut y);
    Ok(LayerGradPair {
        output: Tensor::new(vec![batch, q], y)?,
        pullback: AffinePullback {
            x: x.clone(),
            w: w.clone(),
        },
    })
}

impl<T: Scalar> AffinePullback<T> {
    pub fn backward(self, dy: &Tensor<T>) -> Result<AffineGrads<T>> {
        let [batch, p] = self.x.dims2("affine backward")?;
        let q = self.w.shape()[0];
        if dy.shape() != [batch, q] {
            return Err(Error::shape(
                "affine backward",
                format!("gradient {:?} vs output [{batch}, {q}]", dy.shape()),
            ));
        }
        let mut dx = vec![T::ZERO; batch * p];
        T::gemm(batch, q, p, dy.data(), false, self.w.data(), false, T::ZERO, &mut dx);
        let mut dw = vec![T::ZERO; q * p];
        T::gemm(q, batch, p, dy.data(), true, self.x.data(), false, T::ZERO, &mut dw);
        let mut db = vec![T::ZERO; q];
        for row in dy.data().chunks(q) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Ok(AffineGrads {
            dx: Tensor::new(vec![batch, p], dx)?,
            dw: Tensor::new(vec![q, p], dw)?,
            db: Tensor::new(vec![q], db)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights_pass_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::random_normal(&[4, 3], 1.0, &mut rng);
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = affine(&x, &w, &Tensor::zeros(&[3])).unwrap().output;
        assert_eq!(y, x);
    }

    #[test]
    fn bias_gradient_is_column_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::random_normal(&[5, 3], 1.0, &mut rng);
        let w = Tensor::random_normal(&[2, 3], 1.0, &mut rng);
        let dy = Tensor::random_normal(&[5, 2], 1.0, &mut rng);
        let grads = affine(&x, &w, &Tensor::zeros(&[2]))
            .unwrap()
            .pullback
            .backward(&dy)
            .unwrap();
        for j in 0..2 {
            let col: f64 = (0..5).map(|i| dy.data()[i * 2 + j]).sum();
            assert!((grads.db.data()[j] - col).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_inner_dimension_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(affine(&x, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2])).is_err());
        assert!(affine(&x, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::random_normal(&[4, 5], 1.0, &mut rng);
            let w = Tensor::random_normal(&[3, 5], 1.0, &mut rng);
            let b = Tensor::random_normal(&[3], 1.0, &mut rng);
            let r = Tensor::random_normal(&[4, 3], 1.0, &mut rng);
            let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let pair = affine(x, w, b)?;
                let v = pair.output.dot(&r)?;
                Ok((v, pair.pullback.backward(&r)?))
            };
            let fx = |x: &Tensor<f64>| run(x, &w, &b).map(|(v, g)| (v, g.dx));
            let fw = |w: &Tensor<f64>| run(&x, w, &b).map(|(v, g)| (v, g.dw));
            let fb = |b: &Tensor<f64>| run(&x, &w, b).map(|(v, g)| (v, g.db));
            assert!(gradcheck(fx, &x, 1e-5).unwrap().max_rel_error < 1e-6);
            assert!(gradcheck(fw, &w, 1e-5).unwrap().max_rel_error < 1e-6);
            assert!(gradcheck(fb, &b, 1e-5).unwrap().max_rel_error < 1e-6);
        }
    }
}

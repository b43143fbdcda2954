//! Central-difference gradient checker.
//!
//! Relative error per element is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::norm::{bn_backward, bn_forward, modified_backward, modified_forward, NormForm};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index where the worst error occurred.
    pub worst_index: usize,
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// `f` returns the scalar value and the analytic gradient at its argument.
/// The gradient is taken at `x`; each element is then probed at `x ± h`.
pub fn gradcheck<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let (value, analytic) = f(x)?;
    if !value.is_finite() || !analytic.all_finite() {
        return Err(Error::NonFinite("gradcheck analytic evaluation"));
    }
    analytic.expect_same_shape(x, "gradcheck")?;

    let mut probe = x.clone();
    let mut numeric = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("gradcheck probe"));
        }
        numeric.data_mut()[i] = (plus - minus) / (2.0 * h);
    }

    let (worst_index, max_rel_error) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

// Division in `TwoFloat` is only good to about 1e-17; one Newton step restores
// full double-double accuracy.
fn div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q = a / b;
    q + (a - q * b) / b
}

/// `sum p * (y(x) - base)` with `y` the per-channel batch normalization of `x`,
/// evaluated in double-double arithmetic.
fn reference_loss(form: NormForm, x: &[f64], probe: &[f64], base: &[f64], shape: [usize; 4], eps: f64) -> f64 {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let count = TwoFloat::from((n * plane) as f64);
    let zero = TwoFloat::from(0.0);
    let mut loss = zero;
    for ch in 0..c {
        let idx: Vec<usize> = (0..n)
            .flat_map(|b| (0..plane).map(move |k| (b * c + ch) * plane + k))
            .collect();
        let mu = match form {
            NormForm::Vanilla => div(idx.iter().fold(zero, |acc, &i| acc + x[i]), count),
            NormForm::Modified => zero,
        };
        let sq = idx.iter().fold(zero, |acc, &i| {
            let d = TwoFloat::from(x[i]) - mu;
            acc + d * d
        });
        let denom = (div(sq, count) + eps).sqrt();
        for &i in &idx {
            let y = div(TwoFloat::from(x[i]) - mu, denom);
            loss += (y - base[i]) * probe[i];
        }
    }
    f64::from(loss)
}

/// Gradcheck of a normalization backward (batch statistics, unit `gamma`,
/// zero `beta`) on a seeded standard-normal input of the given shape.
///
/// The probed loss is `sum p * (y(x) - y(x0))` for a seeded direction `p`,
/// computed by an independent double-double forward so that central
/// differences are not dominated by roundoff. The analytic side is the
/// library backward fed `dL/dy = p`.
pub fn norm_gradcheck(form: NormForm, shape: [usize; 4], seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::random_normal(&shape, 1.0, &mut rng);
    let probe = Tensor::<f64>::random_normal(&shape, 1.0, &mut rng);
    let c = shape[1];
    let (gamma, beta) = (vec![1.0; c], vec![0.0; c]);
    let forward = |x: &Tensor<f64>| match form {
        NormForm::Vanilla => bn_forward(x, &gamma, &beta, eps),
        NormForm::Modified => modified_forward(x, &gamma, &beta, eps),
    };
    let base = forward(&x)?.0.z;
    gradcheck(
        |x| {
            let (_, cache) = forward(x)?;
            let grads = match form {
                NormForm::Vanilla => bn_backward(&probe, &cache)?,
                NormForm::Modified => modified_backward(&probe, &cache)?,
            };
            let value = reference_loss(form, x.data(), probe.data(), base.data(), shape, eps);
            Ok((value, grads.dx))
        },
        &x,
        DEFAULT_STEP,
    )
}

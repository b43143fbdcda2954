//! Stateless single-group normalization kernels.
//!
//! A forward pass is fully described by a [`Standardizer`]: per channel, the
//! value subtracted (`shift`), the divisor (`denom`), and the renormalization
//! pair `(r, d)` so that `y = (x - shift) / denom`, `y_hat = r * y + d`, and
//! `z = gamma * y_hat + beta`. The backward pass treats `denom`, `r`, and `d`
//! as constants and applies
//!
//! ```text
//! dy = r * gamma * dz
//! dx = (dy - g - y * psi) / denom      (vanilla)
//! dx = (dy - y * psi) / denom          (modified)
//! ```
//!
//! where `g`, `psi` are either this batch's gradient statistics or moving
//! estimates of them.

use crate::error::{Error, Result};
use crate::norm::NormForm;
use crate::stats::{batch_moments, chi_squared, grad_stats};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub form: NormForm,
    pub shift: Vec<f64>,
    pub denom: Vec<f64>,
    pub r: Vec<f64>,
    pub d: Vec<f64>,
}

impl Standardizer {
    pub fn plain(form: NormForm, shift: Vec<f64>, denom: Vec<f64>) -> Self {
        let c = denom.len();
        Self {
            form,
            shift,
            denom,
            r: vec![1.0; c],
            d: vec![0.0; c],
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormOutput<T> {
    pub y_hat: Tensor<T>,
    pub z: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    form: NormForm,
    y: Tensor<T>,
    denom: Vec<f64>,
    r: Vec<f64>,
    d: Vec<f64>,
    gamma: Vec<T>,
}

impl<T: Scalar> NormCache<T> {
    /// The normalized activations `y`.
    pub fn y(&self) -> &Tensor<T> {
        &self.y
    }

    pub fn form(&self) -> NormForm {
        self.form
    }

    pub fn denom(&self) -> &[f64] {
        &self.denom
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }
}

#[derive(Clone, Debug)]
pub struct NormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
    /// `g` and `psi` of this batch, computed from `y` and the r-scaled gradient.
    pub g_batch: Vec<f64>,
    pub psi_batch: Vec<f64>,
}

pub fn clip(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

fn check_params<T: Scalar>(op: &'static str, c: usize, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            op,
            format!("{c} channels but gamma/beta have {}/{}", gamma.len(), beta.len()),
        ));
    }
    Ok(())
}

fn positive_sqrt(op: &'static str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v.sqrt())
    } else {
        Err(Error::ZeroDenominator { op, value: v })
    }
}

/// Apply a standardizer and the affine map to one normalization group.
pub fn normalize<T: Scalar>(
    x: &Tensor<T>,
    st: &Standardizer,
    gamma: &[T],
    beta: &[T],
) -> Result<(NormOutput<T>, NormCache<T>)> {
    let layout = x.channel_layout("normalize")?;
    check_params("normalize", layout.c, gamma, beta)?;
    if st.denom.len() != layout.c {
        return Err(Error::shape("normalize", "standardizer channel count"));
    }
    if let Some(&bad) = st.denom.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::ZeroDenominator {
            op: "normalize",
            value: bad,
        });
    }
    let xd = x.data();
    let mut y = vec![T::ZERO; x.len()];
    let mut y_hat = vec![T::ZERO; x.len()];
    let mut z = vec![T::ZERO; x.len()];
    for ch in 0..layout.c {
        let shift = T::from_f64(st.shift[ch]);
        let inv = T::from_f64(1.0 / st.denom[ch]);
        let (r, d) = (T::from_f64(st.r[ch]), T::from_f64(st.d[ch]));
        let identity = st.r[ch] == 1.0 && st.d[ch] == 0.0;
        let (g, b) = (gamma[ch], beta[ch]);
        layout.for_channel(ch, |i| {
            let yi = (xd[i] - shift) * inv;
            let yh = if identity { yi } else { r * yi + d };
            y[i] = yi;
            y_hat[i] = yh;
            z[i] = g * yh + b;
        });
    }
    let shape = x.shape().to_vec();
    Ok((
        NormOutput {
            y_hat: Tensor::new(shape.clone(), y_hat)?,
            z: Tensor::new(shape.clone(), z)?,
        },
        NormCache {
            form: st.form,
            y: Tensor::new(shape, y)?,
            denom: st.denom.clone(),
            r: st.r.clone(),
            d: st.d.clone(),
            gamma: gamma.to_vec(),
        },
    ))
}

/// Backward through one group; `choose` maps this batch's `(g, psi)` to the
/// pair actually used (identity for batch statistics).
pub fn norm_backward_with<T, F>(dz: &Tensor<T>, cache: &NormCache<T>, choose: F) -> Result<NormGrads<T>>
where
    T: Scalar,
    F: FnOnce(&[f64], &[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    dz.expect_same_shape(&cache.y, "norm backward")?;
    let layout = dz.channel_layout("norm backward")?;
    let (dzd, yd) = (dz.data(), cache.y.data());

    let mut dgamma = vec![0.0; layout.c];
    let mut dbeta = vec![0.0; layout.c];
    let mut dy = vec![T::ZERO; dz.len()];
    for ch in 0..layout.c {
        let (r, d) = (cache.r[ch], cache.d[ch]);
        let scale = T::from_f64(r) * cache.gamma[ch];
        let (mut sg, mut sb) = (0.0, 0.0);
        layout.for_channel(ch, |i| {
            let g = dzd[i].to_f64();
            sg += g * (r * yd[i].to_f64() + d);
            sb += g;
            dy[i] = scale * dzd[i];
        });
        dgamma[ch] = sg;
        dbeta[ch] = sb;
    }
    let dy = Tensor::new(dz.shape().to_vec(), dy)?;
    let (g_batch, psi_batch) = grad_stats(&cache.y, &dy)?;
    let (g, psi) = choose(&g_batch, &psi_batch)?;
    if g.len() != layout.c || psi.len() != layout.c {
        return Err(Error::shape("norm backward", "gradient statistics channel count"));
    }

    let dyd = dy.data();
    let mut dx = vec![T::ZERO; dz.len()];
    for ch in 0..layout.c {
        let inv = T::from_f64(1.0 / cache.denom[ch]);
        let p = T::from_f64(psi[ch]);
        let gc = match cache.form {
            NormForm::Vanilla => T::from_f64(g[ch]),
            NormForm::Modified => T::ZERO,
        };
        layout.for_channel(ch, |i| {
            dx[i] = (dyd[i] - gc - yd[i] * p) * inv;
        });
    }
    Ok(NormGrads {
        dx: Tensor::new(dz.shape().to_vec(), dx)?,
        dgamma,
        dbeta,
        g_batch,
        psi_batch,
    })
}

fn batch_choice(g: &[f64], psi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((g.to_vec(), psi.to_vec()))
}

/// Batch normalization with batch statistics.
pub fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(NormOutput<T>, NormCache<T>)> {
    let (mu, sigma2) = batch_moments(x)?;
    let denom = sigma2
        .iter()
        .map(|&v| positive_sqrt("bn_forward", v + eps))
        .collect::<Result<Vec<_>>>()?;
    normalize(x, &Standardizer::plain(NormForm::Vanilla, mu, denom), gamma, beta)
}

/// Backward with this batch's `g` and `psi`. The cache must come from a
/// vanilla-form forward (`bn_forward` or `brn_forward`).
pub fn bn_backward<T: Scalar>(dz: &Tensor<T>, cache: &NormCache<T>) -> Result<NormGrads<T>> {
    if cache.form != NormForm::Vanilla {
        return Err(Error::shape("bn_backward", "cache is from a modified-form forward"));
    }
    norm_backward_with(dz, cache, batch_choice)
}

/// Batch renormalization: batch standardization followed by the clipped
/// correction towards the moving estimates `ema_mu`, `ema_sigma2`.
#[allow(clippy::too_many_arguments)]
pub fn brn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    ema_mu: &[f64],
    ema_sigma2: &[f64],
    clip_bound: f64,
    d_max: f64,
    eps: f64,
) -> Result<(NormOutput<T>, NormCache<T>)> {
    let (mu, sigma2) = batch_moments(x)?;
    if ema_mu.len() != mu.len() || ema_sigma2.len() != mu.len() {
        return Err(Error::shape("brn_forward", "moving statistics channel count"));
    }
    let mut st = Standardizer::plain(NormForm::Vanilla, mu, vec![0.0; sigma2.len()]);
    for ch in 0..sigma2.len() {
        let sigma_b = positive_sqrt("brn_forward", sigma2[ch] + eps)?;
        let sigma_hat = positive_sqrt("brn_forward", ema_sigma2[ch] + eps)?;
        st.denom[ch] = sigma_b;
        st.r[ch] = clip(sigma_b / sigma_hat, 1.0 / clip_bound, clip_bound);
        st.d[ch] = clip((st.shift[ch] - ema_mu[ch]) / sigma_hat, -d_max, d_max);
    }
    normalize(x, &st, gamma, beta)
}

/// Second-moment normalization `y = x / sqrt(chi2 + eps)` with batch statistics.
pub fn modified_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(NormOutput<T>, NormCache<T>)> {
    let chi2 = chi_squared(x)?;
    let denom = chi2
        .iter()
        .map(|&v| positive_sqrt("modified_forward", v + eps))
        .collect::<Result<Vec<_>>>()?;
    let shift = vec![0.0; denom.len()];
    normalize(x, &Standardizer::plain(NormForm::Modified, shift, denom), gamma, beta)
}

pub fn modified_backward<T: Scalar>(dz: &Tensor<T>, cache: &NormCache<T>) -> Result<NormGrads<T>> {
    if cache.form != NormForm::Modified {
        return Err(Error::shape(
            "modified_backward",
            "cache is from a vanilla-form forward",
        ));
    }
    norm_backward_with(dz, cache, batch_choice)
}

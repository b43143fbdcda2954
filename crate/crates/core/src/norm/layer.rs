use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::functional::{norm_backward_with, normalize, NormCache, Standardizer};
use crate::norm::{clip, NormForm, NormVariantConfig, StatSource};
use crate::stats::{BatchStats, EmaState, SmaBuffer};
use crate::tensor::{Scalar, Tensor};

/// Moving estimates of every statistic a variant may consult.
///
/// EMAs start at `mu = 0`, `sigma2 = chi2 = 1`, `g = psi = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovingStats {
    pub mu: EmaState,
    pub sigma2: EmaState,
    pub chi2: EmaState,
    pub g: EmaState,
    pub psi: EmaState,
    pub mu_sma: SmaBuffer,
    pub sigma2_sma: SmaBuffer,
    pub chi2_sma: SmaBuffer,
    pub g_sma: SmaBuffer,
    pub psi_sma: SmaBuffer,
}

impl MovingStats {
    pub fn new(channels: usize, momentum: f64, capacity: usize) -> Result<Self> {
        let ema = |init| EmaState::new(channels, init, momentum);
        let sma = || SmaBuffer::new(capacity);
        Ok(Self {
            mu: ema(0.0)?,
            sigma2: ema(1.0)?,
            chi2: ema(1.0)?,
            g: ema(0.0)?,
            psi: ema(0.0)?,
            mu_sma: sma()?,
            sigma2_sma: sma()?,
            chi2_sma: sma()?,
            g_sma: sma()?,
            psi_sma: sma()?,
        })
    }
}

/// Statistics of the first normalization group seen in the latest step,
/// kept for tracing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerStatSnapshot {
    pub batch: BatchStats,
    pub chi2_sma: Vec<f64>,
    pub psi_sma: Vec<f64>,
}

#[derive(Debug)]
struct GroupCache<T> {
    cache: NormCache<T>,
    bp_source: StatSource,
}

/// Per-channel linear map `z = scale * x + shift` a trained layer reduces to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalizedNorm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Scalar> FinalizedNorm<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![T::ONE; channels],
            shift: vec![T::ZERO; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = x.clone();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    pub fn apply_in_place(&self, x: &mut Tensor<T>) -> Result<()> {
        let layout = x.channel_layout("finalized norm")?;
        if layout.c != self.scale.len() {
            return Err(Error::shape(
                "finalized norm",
                format!("{} channels for a {}-channel normalizer", layout.c, self.scale.len()),
            ));
        }
        for (k, plane) in x.data_mut().chunks_mut(layout.s).enumerate() {
            let ch = k % layout.c;
            let (a, b) = (self.scale[ch], self.shift[ch]);
            for v in plane {
                *v = a * *v + b;
            }
        }
        Ok(())
    }
}

/// A normalization layer with learnable `gamma`/`beta` and moving statistics.
///
/// `forward` takes a whole gradient batch and normalizes it in contiguous
/// groups of `group_size` samples, each group with its own statistics. Moving
/// estimates are updated once per group, in group order. `backward` must
/// follow each `forward` exactly once.
#[derive(Debug, Serialize, Deserialize)]
pub struct NormLayer<T> {
    config: NormVariantConfig,
    channels: usize,
    gamma: Vec<T>,
    beta: Vec<T>,
    moving: MovingStats,
    iteration: u64,
    #[serde(skip)]
    frozen: bool,
    #[serde(skip)]
    pending: Vec<GroupCache<T>>,
    #[serde(skip)]
    snapshot: Option<LayerStatSnapshot>,
}

pub fn build_variant<T: Scalar>(config: &NormVariantConfig, channels: usize) -> Result<NormLayer<T>> {
    NormLayer::new(config.clone(), channels)
}

#[derive(Debug)]
pub struct NormLayerGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

impl<T: Scalar> NormLayer<T> {
    pub fn new(config: NormVariantConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::Config("normalization layer needs at least one channel".into()));
        }
        let moving = MovingStats::new(channels, config.momentum, config.sma_capacity)?;
        Ok(Self {
            config,
            channels,
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            moving,
            iteration: 0,
            frozen: false,
            pending: Vec::new(),
            snapshot: None,
        })
    }

    pub fn config(&self) -> &NormVariantConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gamma(&self) -> &[T] {
        &self.gamma
    }

    pub fn beta(&self) -> &[T] {
        &self.beta
    }

    pub fn gamma_mut(&mut self) -> &mut [T] {
        &mut self.gamma
    }

    pub fn beta_mut(&mut self) -> &mut [T] {
        &mut self.beta
    }

    pub fn gamma_beta_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.gamma, &mut self.beta)
    }

    pub fn moving(&self) -> &MovingStats {
        &self.moving
    }

    pub fn moving_mut(&mut self) -> &mut MovingStats {
        &mut self.moving
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Stop updating moving statistics; training-mode passes then read them only.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn in_warmup(&self) -> bool {
        self.iteration < self.config.warmup_iters
    }

    pub fn snapshot(&self) -> Option<&LayerStatSnapshot> {
        self.snapshot.as_ref()
    }

    fn effective_sources(&self) -> (StatSource, StatSource) {
        if self.in_warmup() {
            (StatSource::Batch, StatSource::Batch)
        } else {
            (self.config.fp_source, self.config.bp_source)
        }
    }

    /// `(mean, variance-like)` from a source; the mean is zero for the modified form.
    fn source_stats(&self, source: StatSource, batch: &BatchStats) -> (Vec<f64>, Vec<f64>) {
        let m = &self.moving;
        let pick = |sma: &SmaBuffer, fallback: &Vec<f64>| sma.mean().unwrap_or_else(|| fallback.clone());
        match self.config.form {
            NormForm::Vanilla => match source {
                StatSource::Batch => (batch.mu.clone(), batch.sigma2.clone()),
                StatSource::Ema => (m.mu.value.clone(), m.sigma2.value.clone()),
                StatSource::Sma => (pick(&m.mu_sma, &batch.mu), pick(&m.sigma2_sma, &batch.sigma2)),
            },
            NormForm::Modified => {
                let var = match source {
                    StatSource::Batch => batch.chi2.clone(),
                    StatSource::Ema => m.chi2.value.clone(),
                    StatSource::Sma => pick(&m.chi2_sma, &batch.chi2),
                };
                (vec![0.0; self.channels], var)
            }
        }
    }

    fn standardizer(&self, batch: &BatchStats) -> Result<(Standardizer, StatSource)> {
        let (fp, bp) = self.effective_sources();
        let eps = self.config.epsilon;
        let sqrt_pos = |v: f64| {
            let s = v + eps;
            if s > 0.0 && s.is_finite() {
                Ok(s.sqrt())
            } else {
                Err(Error::ZeroDenominator {
                    op: "norm layer",
                    value: s,
                })
            }
        };
        let (shift, var) = self.source_stats(bp, batch);
        let denom = var.iter().map(|&v| sqrt_pos(v)).collect::<Result<Vec<_>>>()?;
        let mut st = Standardizer::plain(self.config.form, shift, denom);
        if fp != bp {
            let (t_shift, t_var) = self.source_stats(fp, batch);
            let lambda = self.config.clip_bound;
            for ch in 0..self.channels {
                let t_denom = sqrt_pos(t_var[ch])?;
                st.r[ch] = clip(st.denom[ch] / t_denom, 1.0 / lambda, lambda);
                if self.config.form == NormForm::Vanilla {
                    let dm = self.config.brn_d_max;
                    st.d[ch] = clip((st.shift[ch] - t_shift[ch]) / t_denom, -dm, dm);
                }
            }
        }
        Ok((st, bp))
    }

    fn forward_group(&mut self, x: &Tensor<T>, first: bool) -> Result<Tensor<T>> {
        let batch = BatchStats::forward(x)?;
        if !self.frozen {
            let m = &mut self.moving;
            m.mu.update(&batch.mu)?;
            m.sigma2.update(&batch.sigma2)?;
            m.chi2.update(&batch.chi2)?;
            m.mu_sma.push(&batch.mu)?;
            m.sigma2_sma.push(&batch.sigma2)?;
            m.chi2_sma.push(&batch.chi2)?;
        }
        let (st, bp_source) = self.standardizer(&batch)?;
        let (out, cache) = normalize(x, &st, &self.gamma, &self.beta)?;
        if first {
            self.snapshot = Some(LayerStatSnapshot {
                chi2_sma: self.moving.chi2_sma.mean().unwrap_or_else(|| batch.chi2.clone()),
                batch,
                psi_sma: Vec::new(),
            });
        }
        self.pending.push(GroupCache { cache, bp_source });
        Ok(out.z)
    }

    /// Training-mode forward over a gradient batch split into groups.
    pub fn forward(&mut self, x: &Tensor<T>, group_size: usize) -> Result<Tensor<T>> {
        let layout = x.channel_layout("norm layer")?;
        if layout.c != self.channels {
            return Err(Error::shape(
                "norm layer",
                format!("{} input channels for a {}-channel layer", layout.c, self.channels),
            ));
        }
        let groups = split_batch(x, group_size)?;
        self.pending.clear();
        let mut outputs = Vec::with_capacity(groups.len());
        for (k, g) in groups.iter().enumerate() {
            outputs.push(self.forward_group(g, k == 0)?);
        }
        self.iteration += 1;
        concat_batch(outputs)
    }

    pub fn backward(&mut self, dz: &Tensor<T>) -> Result<NormLayerGrads<T>> {
        if self.pending.is_empty() {
            return Err(Error::MissingCache("norm layer"));
        }
        let pending = std::mem::take(&mut self.pending);
        let group_size = pending[0].cache.y().shape()[0];
        if dz.shape()[0] != group_size * pending.len() {
            return Err(Error::shape(
                "norm layer backward",
                format!(
                    "gradient batch {} vs {} groups of {group_size}",
                    dz.shape()[0],
                    pending.len()
                ),
            ));
        }
        let dz_groups = split_batch(dz, group_size)?;
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        let mut dx_groups = Vec::with_capacity(pending.len());
        for (k, (dzg, gc)) in dz_groups.iter().zip(&pending).enumerate() {
            let frozen = self.frozen;
            let moving = &mut self.moving;
            let grads = norm_backward_with(dzg, &gc.cache, |g_b, psi_b| {
                if !frozen {
                    moving.g.update(g_b)?;
                    moving.psi.update(psi_b)?;
                    moving.g_sma.push(g_b)?;
                    moving.psi_sma.push(psi_b)?;
                }
                Ok(match gc.bp_source {
                    StatSource::Batch => (g_b.to_vec(), psi_b.to_vec()),
                    StatSource::Ema => (moving.g.value.clone(), moving.psi.value.clone()),
                    StatSource::Sma => (
                        moving.g_sma.mean().unwrap_or_else(|| g_b.to_vec()),
                        moving.psi_sma.mean().unwrap_or_else(|| psi_b.to_vec()),
                    ),
                })
            })?;
            if k == 0 {
                let psi_sma = self.moving.psi_sma.mean().unwrap_or_else(|| grads.psi_batch.clone());
                if let Some(snap) = self.snapshot.as_mut() {
                    snap.batch.g = grads.g_batch.clone();
                    snap.batch.psi = grads.psi_batch.clone();
                    snap.psi_sma = psi_sma;
                }
            }
            for ch in 0..self.channels {
                dgamma[ch] += grads.dgamma[ch];
                dbeta[ch] += grads.dbeta[ch];
            }
            dx_groups.push(grads.dx);
        }
        let (dgamma, dbeta) = if self.config.affine {
            (
                dgamma.into_iter().map(T::from_f64).collect(),
                dbeta.into_iter().map(T::from_f64).collect(),
            )
        } else {
            (vec![T::ZERO; self.channels], vec![T::ZERO; self.channels])
        };
        Ok(NormLayerGrads {
            dx: concat_batch(dx_groups)?,
            dgamma,
            dbeta,
        })
    }

    /// Fold EMA statistics and the affine parameters into one linear map.
    pub fn finalize_for_inference(&self) -> Result<FinalizedNorm<T>> {
        let eps = self.config.epsilon;
        let m = &self.moving;
        let mut scale = Vec::with_capacity(self.channels);
        let mut shift = Vec::with_capacity(self.channels);
        for ch in 0..self.channels {
            let (g, b) = (self.gamma[ch].to_f64(), self.beta[ch].to_f64());
            let var = match self.config.form {
                NormForm::Vanilla => m.sigma2.value[ch],
                NormForm::Modified => m.chi2.value[ch],
            } + eps;
            if !(var > 0.0 && var.is_finite()) {
                return Err(Error::ZeroDenominator {
                    op: "finalize_for_inference",
                    value: var,
                });
            }
            let s = g / var.sqrt();
            scale.push(T::from_f64(s));
            shift.push(T::from_f64(match self.config.form {
                NormForm::Vanilla => b - s * m.mu.value[ch],
                NormForm::Modified => b,
            }));
        }
        Ok(FinalizedNorm { scale, shift })
    }

    /// Inference-mode forward: EMA statistics only, nothing is updated.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.finalize_for_inference()?.apply(x)
    }
}

/// Split along the batch axis into contiguous groups of `group_size` samples.
pub(crate) fn split_batch<T: Scalar>(x: &Tensor<T>, group_size: usize) -> Result<Vec<Tensor<T>>> {
    let n = x.shape()[0];
    if group_size == 0 || n % group_size != 0 {
        return Err(Error::Config(format!(
            "batch of {n} cannot be split into groups of {group_size}"
        )));
    }
    if group_size == n {
        return Ok(vec![x.clone()]);
    }
    let per_sample = x.len() / n;
    let mut shape = x.shape().to_vec();
    shape[0] = group_size;
    x.data()
        .chunks(per_sample * group_size)
        .map(|chunk| Tensor::new(shape.clone(), chunk.to_vec()))
        .collect()
}

pub(crate) fn concat_batch<T: Scalar>(mut parts: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    if parts.len() == 1 {
        return Ok(parts.pop().expect("one part"));
    }
    let first = parts.first().ok_or(Error::EmptyBatch("concat_batch"))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(shape, data)
}

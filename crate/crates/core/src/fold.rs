//! Folding linear normalizers into convolutions, the instance-level
//! contrast path, and inference throughput measurement.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::FinalizedNorm;
use crate::ops::conv2d_infer;
use crate::tensor::{Scalar, Tensor};

/// Convolution weights with an optional per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_infer(x, &self.weights, self.bias.as_deref(), self.stride, self.pad)
    }
}

/// A convolution with a normalizer absorbed: `w' = scale * w`, `b' = scale * b + shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedConv<T> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> FoldedConv<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_infer(x, &self.weights, Some(&self.bias), self.stride, self.pad)
    }

    pub fn into_unit(self) -> ConvUnit<T> {
        ConvUnit {
            weights: self.weights,
            bias: Some(self.bias),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Per-instance group standardization followed by a per-channel affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNorm<T> {
    pub groups: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub epsilon: f64,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        Self {
            groups,
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            epsilon: 1e-5,
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        instance_norm_inference(x, self.groups, &self.gamma, &self.beta, self.epsilon)
    }
}

/// What follows a convolution at inference time.
#[derive(Clone, Debug, PartialEq)]
pub enum Normalizer<T> {
    Linear(FinalizedNorm<T>),
    Instance(InstanceNorm<T>),
}

impl<T: Scalar> Normalizer<T> {
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = x.clone();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    pub fn apply_in_place(&self, x: &mut Tensor<T>) -> Result<()> {
        match self {
            Normalizer::Linear(f) => f.apply_in_place(x),
            Normalizer::Instance(n) => {
                let [_, c, _, _] = x.dims4("instance_norm_inference")?;
                if n.groups == 0 || c % n.groups != 0 || n.gamma.len() != c || n.beta.len() != c {
                    return Err(Error::shape(
                        "instance_norm_inference",
                        "grouping or gamma/beta channel count",
                    ));
                }
                instance_norm_in_place(x, n.groups, &n.gamma, &n.beta, n.epsilon)
            }
        }
    }
}

pub fn fold<T: Scalar>(conv: &ConvUnit<T>, norm: &Normalizer<T>) -> Result<FoldedConv<T>> {
    let Normalizer::Linear(finalized) = norm else {
        return Err(Error::NotFoldable(
            "instance-level statistics depend on the input".into(),
        ));
    };
    let co = conv.out_channels();
    if finalized.channels() != co {
        return Err(Error::shape(
            "fold",
            format!("normalizer has {} channels, convolution {co}", finalized.channels()),
        ));
    }
    let mut weights = conv.weights.clone();
    let per_out = weights.len() / co;
    for (ch, row) in weights.data_mut().chunks_mut(per_out).enumerate() {
        for v in row {
            *v = *v * finalized.scale[ch];
        }
    }
    let bias = (0..co)
        .map(|ch| {
            let b = conv.bias.as_ref().map_or(T::ZERO, |b| b[ch]);
            finalized.scale[ch] * b + finalized.shift[ch]
        })
        .collect();
    Ok(FoldedConv {
        weights,
        bias,
        stride: conv.stride,
        pad: conv.pad,
    })
}

/// Standardize each (instance, group) slab with its own mean and variance.
pub fn instance_norm_inference<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let [_, c, _, _] = x.dims4("instance_norm_inference")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "instance_norm_inference",
            format!("{c} channels cannot be split into {groups} groups"),
        ));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("instance_norm_inference", "gamma/beta channel count"));
    }
    let mut out = x.clone();
    instance_norm_in_place(&mut out, groups, gamma, beta, eps)?;
    Ok(out)
}

fn instance_norm_in_place<T: Scalar>(
    x: &mut Tensor<T>,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<()> {
    let [_, c, h, w] = x.dims4("instance_norm_inference")?;
    let plane = h * w;
    let per_group = c / groups * plane;
    for (slab_idx, slab) in x.data_mut().chunks_mut(per_group).enumerate() {
        let count = per_group as f64;
        let mean = slab.iter().map(|v| v.to_f64()).sum::<f64>() / count;
        let var = slab
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / count;
        let denom = var + eps;
        if !(denom > 0.0) {
            return Err(Error::ZeroDenominator {
                op: "instance_norm_inference",
                value: denom,
            });
        }
        let inv = 1.0 / denom.sqrt();
        let first_channel = (slab_idx % groups) * (c / groups);
        for (k, row) in slab.chunks_mut(plane).enumerate() {
            let ch = first_channel + k;
            let scale = T::from_f64(gamma[ch].to_f64() * inv);
            let shift = T::from_f64(beta[ch].to_f64() - gamma[ch].to_f64() * inv * mean);
            for v in row {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(())
}

fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        *v = if *v > T::ZERO { *v } else { T::ZERO };
    }
}

/// Bias and ReLU in one sweep over an NCHW tensor.
fn bias_relu_in_place<T: Scalar>(x: &mut Tensor<T>, bias: &[T]) {
    let c = bias.len();
    let plane = x.len() / (x.shape()[0] * c);
    for (k, row) in x.data_mut().chunks_mut(plane).enumerate() {
        let b = bias[k % c];
        for v in row {
            let t = *v + b;
            *v = if t > T::ZERO { t } else { T::ZERO };
        }
    }
}

/// One conv, its optional normalizer, then ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct StackLayer<T> {
    pub conv: ConvUnit<T>,
    pub norm: Option<Normalizer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T> {
    pub layers: Vec<StackLayer<T>>,
}

/// Shape of the synthetic benchmark stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchStackConfig {
    pub layers: usize,
    pub in_channels: usize,
    pub width: usize,
    pub spatial: usize,
    pub kernel: usize,
    pub batch: usize,
}

impl Default for BenchStackConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            in_channels: 32,
            width: 64,
            spatial: 56,
            kernel: 1,
            batch: 1,
        }
    }
}

impl BenchStackConfig {
    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.spatial, self.spatial]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.in_channels == 0 || self.width == 0 || self.spatial == 0 || self.batch == 0 {
            return Err(Error::Config("bench stack extents must be positive".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config("bench kernel must be odd".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> ConvStack<T> {
    /// Bias-free convolutions, each followed by a random finalized linear normalizer.
    pub fn random_linear<R: Rng + ?Sized>(cfg: &BenchStackConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut cin = cfg.in_channels;
        for _ in 0..cfg.layers {
            let fan_in = cin * cfg.kernel * cfg.kernel;
            let weights = Tensor::random_normal(
                &[cfg.width, cin, cfg.kernel, cfg.kernel],
                (2.0 / fan_in as f64).sqrt(),
                rng,
            );
            let scale = (0..cfg.width)
                .map(|_| T::from_f64(rng.random_range(0.5..1.5)))
                .collect();
            let shift = (0..cfg.width)
                .map(|_| T::from_f64(rng.random_range(-0.5..0.5)))
                .collect();
            layers.push(StackLayer {
                conv: ConvUnit {
                    weights,
                    bias: None,
                    stride: 1,
                    pad: cfg.kernel / 2,
                },
                norm: Some(Normalizer::Linear(FinalizedNorm { scale, shift })),
            });
            cin = cfg.width;
        }
        Ok(Self { layers })
    }

    /// The same stack with every linear normalizer absorbed into its conv.
    pub fn folded(&self) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| match &l.norm {
                Some(norm) => Ok(StackLayer {
                    conv: fold(&l.conv, norm)?.into_unit(),
                    norm: None,
                }),
                None => Ok(l.clone()),
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// The same convolutions followed by instance-level normalization instead.
    pub fn with_instance_norm(&self, groups_per_layer: Option<usize>) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let c = l.conv.out_channels();
                StackLayer {
                    conv: l.conv.clone(),
                    norm: Some(Normalizer::Instance(InstanceNorm::new(
                        c,
                        groups_per_layer.unwrap_or(c),
                    ))),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            let conv = &layer.conv;
            match (&layer.norm, &conv.bias) {
                (None, Some(bias)) => {
                    cur = conv2d_infer(&cur, &conv.weights, None, conv.stride, conv.pad)?;
                    bias_relu_in_place(&mut cur, bias);
                }
                (norm, _) => {
                    cur = conv.forward(&cur)?;
                    if let Some(norm) = norm {
                        norm.apply_in_place(&mut cur)?;
                    }
                    relu_in_place(&mut cur);
                }
            }
        }
        Ok(cur)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub iters_per_sec: f64,
    pub wall_time_secs: f64,
    pub reps: usize,
    pub input_shape: Vec<usize>,
    pub threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    pub warmup_reps: usize,
    pub timed_reps: usize,
    /// Each repetition repeats the workload until at least this long has passed.
    pub min_rep_secs: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup_reps: 2,
            timed_reps: 5,
            min_rep_secs: 0.1,
        }
    }
}

fn timed_rep(step: &mut dyn FnMut() -> Result<()>, min_secs: f64) -> Result<f64> {
    let t0 = Instant::now();
    let mut iters = 0u64;
    loop {
        step()?;
        iters += 1;
        let elapsed = t0.elapsed().as_secs_f64();
        if elapsed >= min_secs {
            return Ok(iters as f64 / elapsed);
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

pub type Workload<'a> = (&'a str, Box<dyn FnMut() -> Result<()> + 'a>);

/// Median iterations per second of each workload. Timed repetitions are
/// interleaved across workloads so slow drift in machine speed hits all of them.
pub fn bench_interleaved(
    workloads: Vec<Workload<'_>>,
    input_shape: &[usize],
    opts: &BenchOptions,
) -> Result<Vec<BenchReport>> {
    if opts.timed_reps == 0 {
        return Err(Error::Config("bench needs at least one timed repetition".into()));
    }
    let started = Instant::now();
    let (labels, mut steps): (Vec<_>, Vec<_>) = workloads.into_iter().unzip();
    for step in &mut steps {
        for _ in 0..opts.warmup_reps {
            timed_rep(step.as_mut(), 0.0)?;
        }
    }
    let mut rates = vec![Vec::with_capacity(opts.timed_reps); steps.len()];
    for _ in 0..opts.timed_reps {
        for (step, r) in steps.iter_mut().zip(&mut rates) {
            r.push(timed_rep(step.as_mut(), opts.min_rep_secs)?);
        }
    }
    let wall = started.elapsed().as_secs_f64();
    Ok(labels
        .into_iter()
        .zip(rates)
        .map(|(label, r)| BenchReport {
            label: label.to_string(),
            iters_per_sec: median(r),
            wall_time_secs: wall,
            reps: opts.timed_reps,
            input_shape: input_shape.to_vec(),
            threads: 1,
        })
        .collect())
}

/// Median iterations per second of `step` over the timed repetitions.
pub fn bench<F>(label: &str, input_shape: &[usize], opts: &BenchOptions, step: F) -> Result<BenchReport>
where
    F: FnMut() -> Result<()>,
{
    let mut reports = bench_interleaved(vec![(label, Box::new(step))], input_shape, opts)?;
    Ok(reports.remove(0))
}

/// Folded, unfolded, and instance-norm variants of one random stack.
pub fn bench_stacks<R: Rng + ?Sized>(
    cfg: &BenchStackConfig,
    opts: &BenchOptions,
    rng: &mut R,
) -> Result<Vec<BenchReport>> {
    let unfolded = ConvStack::<f32>::random_linear(cfg, rng)?;
    let folded = unfolded.folded()?;
    let instance = unfolded.with_instance_norm(None);
    let input_shape = cfg.input_shape();
    let x = Tensor::random_uniform(&input_shape, -1.0, 1.0, rng);
    let workloads: Vec<Workload<'_>> = [("folded", &folded), ("unfolded", &unfolded), ("instance", &instance)]
        .into_iter()
        .map(|(label, stack)| -> Workload<'_> { (label, Box::new(|| stack.forward(&x).map(drop))) })
        .collect();
    bench_interleaved(workloads, &input_shape, opts)
}

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameters of the synthetic image task.
///
/// Each class owns a Gaussian code center and an overall gain. A sample's code
/// is its class center plus noise, pushed through a fixed random `tanh` layer
/// whose outputs weight smooth spatial patterns. The image is scaled by the
/// class gain times a per-sample jitter, then pixel noise is added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub classes: usize,
    pub image_size: usize,
    pub code_dim: usize,
    pub patterns: usize,
    pub class_spread: f64,
    pub code_noise: f64,
    pub pixel_noise: f64,
    /// Spread of a per-sample random gain on the whole image.
    pub gain_noise: f64,
    /// Spread of the per-class log gain.
    pub class_gain_spread: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 1234,
            n_train: 32000,
            n_val: 5000,
            classes: 10,
            image_size: 16,
            code_dim: 8,
            patterns: 16,
            class_spread: 1.0,
            code_noise: 0.6,
            pixel_noise: 0.3,
            gain_noise: 0.2,
            class_gain_spread: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("dataset splits must be non-empty".into()));
        }
        if self.classes < 2 || self.image_size == 0 || self.code_dim == 0 || self.patterns == 0 {
            return Err(Error::Config(
                "dataset extents must be positive (and at least 2 classes)".into(),
            ));
        }
        for (name, v) in [
            ("class_spread", self.class_spread),
            ("code_noise", self.code_noise),
            ("pixel_noise", self.pixel_noise),
            ("gain_noise", self.gain_noise),
            ("class_gain_spread", self.class_gain_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Images `[N, 1, S, S]` with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.images.len() / self.labels.len().max(1)
    }

    /// Gather samples by index into a batch tensor of the requested precision.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::shape("dataset batch", format!("index {i} of {}", self.len())));
            }
            data.extend(
                self.images.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| T::from_f64(v as f64)),
            );
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub classes: usize,
}

struct Generator {
    centers: Vec<Vec<f64>>,
    class_gains: Vec<f64>,
    mix: Vec<Vec<f64>>,
    offset: Vec<f64>,
    patterns: Vec<Vec<f64>>,
}

impl Generator {
    fn new(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Self {
        let normal = |rng: &mut ChaCha8Rng, s: f64| -> f64 { s * rng.sample::<f64, _>(StandardNormal) };
        let centers = (0..spec.classes)
            .map(|_| (0..spec.code_dim).map(|_| normal(rng, spec.class_spread)).collect())
            .collect();
        let class_gains = (0..spec.classes)
            .map(|_| normal(rng, spec.class_gain_spread).exp())
            .collect();
        let scale = 1.5 / (spec.code_dim as f64).sqrt();
        let mix = (0..spec.patterns)
            .map(|_| (0..spec.code_dim).map(|_| normal(rng, scale)).collect())
            .collect();
        let offset = (0..spec.patterns).map(|_| normal(rng, 0.5)).collect();
        let s = spec.image_size;
        let patterns = (0..spec.patterns)
            .map(|_| {
                let fx = rng.random_range(0..4) as f64;
                let fy = rng.random_range(0..4) as f64;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let cx = rng.random_range(0.2..0.8) * s as f64;
                let cy = rng.random_range(0.2..0.8) * s as f64;
                let width = rng.random_range(0.2..0.5) * s as f64;
                let mut p: Vec<f64> = (0..s * s)
                    .map(|i| {
                        let (y, x) = ((i / s) as f64, (i % s) as f64);
                        let wave = (std::f64::consts::TAU * (fx * x + fy * y) / s as f64 + phase).cos();
                        let r2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (width * width);
                        wave * (-0.5 * r2).exp()
                    })
                    .collect();
                let rms = (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64)
                    .sqrt()
                    .max(1e-12);
                p.iter_mut().for_each(|v| *v /= rms);
                p
            })
            .collect();
        Self {
            centers,
            class_gains,
            mix,
            offset,
            patterns,
        }
    }

    fn render(&self, spec: &DatasetSpec, label: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
        let code: Vec<f64> = self.centers[label]
            .iter()
            .map(|c| c + spec.code_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let gain = self.class_gains[label] * (1.0 + spec.gain_noise * rng.sample::<f64, _>(StandardNormal));
        let weights: Vec<f64> = self
            .mix
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| (row.iter().zip(&code).map(|(a, z)| a * z).sum::<f64>() + b).tanh())
            .collect();
        let pixels = spec.image_size * spec.image_size;
        for i in 0..pixels {
            let clean: f64 = weights.iter().zip(&self.patterns).map(|(w, p)| w * p[i]).sum();
            let noise = spec.pixel_noise * rng.sample::<f64, _>(StandardNormal);
            out.push((gain * clean + noise) as f32);
        }
    }
}

fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

pub fn synth_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let generator = Generator::new(spec, &mut rng);
    let s = spec.image_size;
    let mut make = |n: usize| -> Result<LabeledSet> {
        let labels = balanced_labels(n, spec.classes, &mut rng);
        let mut data = Vec::with_capacity(n * s * s);
        for &l in &labels {
            generator.render(spec, l, &mut rng, &mut data);
        }
        Ok(LabeledSet {
            images: Tensor::new(vec![n, 1, s, s], data)?,
            labels,
        })
    };
    let train = make(spec.n_train)?;
    let val = make(spec.n_val)?;
    Ok(Dataset {
        train,
        val,
        classes: spec.classes,
    })
}

/// Epoch-wise shuffled index stream. The RNG state is part of the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { rng, order, pos: 0 }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

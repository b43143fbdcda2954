//! Monte Carlo checks of the moving-average variance formulas and of the
//! gradient-variance gap between the vanilla and modified backward passes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Normal distribution truncated to `mean ± bound * std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub std: f64,
    pub bound: f64,
}

impl Default for TruncatedNormal {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            bound: 10.0,
        }
    }
}

impl TruncatedNormal {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= self.bound {
                return self.mean + self.std * z;
            }
        }
    }

    /// Exact variance: `std^2 * (1 - 2 c phi(c) / (2 Phi(c) - 1))`.
    pub fn variance(&self) -> f64 {
        let c = self.bound;
        let phi = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = 1.0 - 2.0 * upper_tail(c);
        self.std * self.std * (1.0 - 2.0 * c * phi / mass)
    }
}

/// `P(Z > c)` for a standard normal, via the continued fraction for the Mills ratio.
/// Converges quickly for large `c`; slowly below about 1.
fn upper_tail(c: f64) -> f64 {
    if c <= 0.0 {
        return 0.5;
    }
    let phi = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut frac = c;
    for k in (1..=4000).rev() {
        frac = c + k as f64 / frac;
    }
    phi / frac
}

/// How the observed sequence evolves over the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSpec {
    pub noise: TruncatedNormal,
    /// Deterministic change of the mean per step.
    pub drift_step: f64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            noise: TruncatedNormal::default(),
            drift_step: 0.0,
        }
    }
}

impl SourceSpec {
    fn mean_at(&self, step: usize) -> f64 {
        self.noise.mean + self.drift_step * step as f64
    }

    fn sample<R: Rng + ?Sized>(&self, step: usize, rng: &mut R) -> f64 {
        self.noise.sample(rng) + self.drift_step * step as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub trials: usize,
    pub horizon: usize,
    pub momentum: f64,
    pub window: usize,
    pub source: SourceSpec,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            horizon: 500,
            momentum: 0.98,
            window: 16,
            source: SourceSpec::default(),
            seed: 0,
            tolerance: 0.10,
        }
    }
}

impl McConfig {
    /// 10^5 trials at a 3% tolerance.
    pub fn tightened(self) -> Self {
        Self {
            trials: 100_000,
            tolerance: 0.03,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1000 {
            return Err(Error::Config(format!("need at least 1000 trials, got {}", self.trials)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("momentum {} outside (0, 1)", self.momentum)));
        }
        if self.window == 0 || self.horizon == 0 {
            return Err(Error::Config("window and horizon must be at least 1".into()));
        }
        if self.window > self.horizon {
            return Err(Error::Config(format!(
                "window {} longer than horizon {}",
                self.window, self.horizon
            )));
        }
        if !(self.source.noise.std > 0.0 && self.source.noise.bound > 0.0) {
            return Err(Error::Config("source std and truncation bound must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub format_version: u32,
    pub theorem: String,
    pub empirical: f64,
    pub predicted: f64,
    pub rel_dev: f64,
    pub pass: bool,
    pub trials: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
}

impl TheoremReport {
    fn within(theorem: &str, empirical: f64, predicted: f64, tolerance: f64, trials: usize) -> Self {
        let rel_dev = relative_deviation(empirical, predicted);
        Self {
            format_version: FORMAT_VERSION,
            theorem: theorem.to_string(),
            empirical,
            predicted,
            rel_dev,
            pass: rel_dev.abs() < tolerance,
            trials,
            details: BTreeMap::new(),
        }
    }
}

fn relative_deviation(empirical: f64, predicted: f64) -> f64 {
    if predicted == 0.0 {
        empirical
    } else {
        (empirical - predicted) / predicted
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Unbiased sample variance, summed in a fixed order.
fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// Closed-form variance of an EMA started at zero after `t` updates.
pub fn ema_predicted_variance(momentum: f64, t: usize, source_var: f64) -> f64 {
    let a = momentum;
    (1.0 - a.powf(2.0 * t as f64)) * (1.0 - a) / (1.0 + a) * source_var
}

pub fn verify_ema_variance(cfg: &McConfig) -> Result<TheoremReport> {
    cfg.validate()?;
    let a = cfg.momentum;
    let finals: Vec<f64> = (0..cfg.trials)
        .map(|trial| {
            let mut rng = trial_rng(cfg.seed, trial);
            let mut ema = 0.0;
            for step in 0..cfg.horizon {
                ema = a * ema + (1.0 - a) * cfg.source.sample(step, &mut rng);
            }
            ema
        })
        .collect();
    let predicted = ema_predicted_variance(a, cfg.horizon, cfg.source.noise.variance());
    Ok(TheoremReport::within(
        "ema_variance",
        sample_variance(&finals),
        predicted,
        cfg.tolerance,
        cfg.trials,
    ))
}

/// Mean squared deviation of the window average from the current population
/// mean, compared with `Var / m`. Without drift this is the plain variance; with
/// drift it also carries the lag bias the slow-change condition keeps small.
pub fn verify_sma_variance(cfg: &McConfig) -> Result<TheoremReport> {
    cfg.validate()?;
    let m = cfg.window;
    let last = cfg.horizon - 1;
    let target = cfg.source.mean_at(last);
    let sq_dev: Vec<f64> = (0..cfg.trials)
        .map(|trial| {
            let mut rng = trial_rng(cfg.seed, trial);
            // Only the last `m` observations enter the window at the horizon.
            for step in 0..cfg.horizon - m {
                cfg.source.sample(step, &mut rng);
            }
            let sum: f64 = (cfg.horizon - m..cfg.horizon)
                .map(|step| cfg.source.sample(step, &mut rng))
                .sum();
            let dev = sum / m as f64 - target;
            dev * dev
        })
        .collect();
    let empirical = sq_dev.iter().sum::<f64>() / cfg.trials as f64;
    let predicted = cfg.source.noise.variance() / m as f64;
    Ok(TheoremReport::within(
        "sma_variance",
        empirical,
        predicted,
        cfg.tolerance,
        cfg.trials,
    ))
}

/// Incoming gradient `dL/dy` per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientSource {
    /// Independent standard normal draws.
    Iid,
    /// Every sample receives the same fixed gradient.
    Constant,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapConfig {
    pub trials: usize,
    pub batch: usize,
    /// Spread of the centered layer input.
    pub input: TruncatedNormal,
    pub gradient: GradientSource,
    pub seed: u64,
    /// Pass if the gap is at least `(1 - tolerance)` times the predicted bound.
    pub tolerance: f64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            trials: 200_000,
            batch: 2,
            input: TruncatedNormal::default(),
            gradient: GradientSource::Iid,
            seed: 0,
            tolerance: 0.05,
        }
    }
}

impl GapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1000 {
            return Err(Error::Config(format!("need at least 1000 trials, got {}", self.trials)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.input.mean != 0.0 {
            return Err(Error::Config("the gap check needs a centered input".into()));
        }
        if !(self.input.std > 0.0) {
            return Err(Error::Config("input std must be positive".into()));
        }
        Ok(())
    }
}

const CONSTANT_GRADIENT: f64 = 1.0;

fn draw_gradient<R: Rng + ?Sized>(source: GradientSource, noise: &TruncatedNormal, rng: &mut R) -> f64 {
    match source {
        GradientSource::Iid => noise.sample(rng),
        GradientSource::Constant => CONSTANT_GRADIENT,
        GradientSource::Zero => 0.0,
    }
}

/// Per-sample input gradient variance under both backward forms, with the
/// batch statistics drawn from a batch independent of the probed sample and
/// the moving denominators pinned at their population values.
pub fn verify_variance_gap(cfg: &GapConfig) -> Result<TheoremReport> {
    cfg.validate()?;
    let unit = TruncatedNormal::default();
    let sigma_hat = cfg.input.variance().sqrt();
    // Centered input: the second moment equals the variance.
    let chi_hat = sigma_hat;
    let mut vanilla = Vec::with_capacity(cfg.trials);
    let mut modified = Vec::with_capacity(cfg.trials);
    let mut g_batch = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut rng = trial_rng(cfg.seed, trial);
        let (mut g, mut psi) = (0.0, 0.0);
        for _ in 0..cfg.batch {
            let y = cfg.input.sample(&mut rng) / sigma_hat;
            let dy = draw_gradient(cfg.gradient, &unit, &mut rng);
            g += dy;
            psi += y * dy;
        }
        g /= cfg.batch as f64;
        psi /= cfg.batch as f64;
        let y = cfg.input.sample(&mut rng) / sigma_hat;
        let dy = draw_gradient(cfg.gradient, &unit, &mut rng);
        vanilla.push((dy - g - y * psi) / sigma_hat);
        modified.push((dy - y * psi) / chi_hat);
        g_batch.push(g);
    }
    let var_vanilla = sample_variance(&vanilla);
    let var_modified = sample_variance(&modified);
    let gap = var_vanilla - var_modified;
    let grad_var = match cfg.gradient {
        GradientSource::Iid => unit.variance(),
        GradientSource::Constant | GradientSource::Zero => 0.0,
    };
    let predicted = grad_var / cfg.batch as f64 / (sigma_hat * sigma_hat);
    let pass = if predicted > 0.0 {
        gap >= (1.0 - cfg.tolerance) * predicted
    } else {
        gap.abs() <= cfg.tolerance * var_vanilla.max(f64::MIN_POSITIVE) || (var_vanilla == 0.0 && var_modified == 0.0)
    };
    Ok(TheoremReport {
        format_version: FORMAT_VERSION,
        theorem: "variance_gap".into(),
        empirical: gap,
        predicted,
        rel_dev: relative_deviation(gap, predicted),
        pass,
        trials: cfg.trials,
        details: BTreeMap::from([
            ("batch".into(), cfg.batch as f64),
            ("var_vanilla".into(), var_vanilla),
            ("var_modified".into(), var_modified),
            (
                "var_g_batch".into(),
                sample_variance(&g_batch) / (sigma_hat * sigma_hat),
            ),
        ]),
    })
}

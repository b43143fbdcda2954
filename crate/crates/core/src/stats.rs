//! Per-channel batch statistics and the moving-average estimators built on them.
//!
//! All statistics are accumulated in `f64` in a fixed sequential order, whatever
//! the element type of the tensor they summarize.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// The five per-channel batch statistics a normalization layer touches.
/// `g` and `psi` stay empty until the backward pass fills them in.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub chi2: Vec<f64>,
    pub g: Vec<f64>,
    pub psi: Vec<f64>,
}

impl BatchStats {
    pub fn forward<T: Scalar>(x: &Tensor<T>) -> Result<Self> {
        let (mu, sigma2) = batch_moments(x)?;
        let chi2 = chi_squared(x)?;
        Ok(Self {
            mu,
            sigma2,
            chi2,
            ..Self::default()
        })
    }
}

/// Per-channel mean and biased variance (divide by the element count), two-pass.
pub fn batch_moments<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let layout = x.channel_layout("batch_moments")?;
    if layout.count() == 0 {
        return Err(Error::EmptyBatch("batch_moments"));
    }
    let inv = 1.0 / layout.count() as f64;
    let data = x.data();
    let mut mu = vec![0.0; layout.c];
    let mut sigma2 = vec![0.0; layout.c];
    for ch in 0..layout.c {
        let mut sum = 0.0;
        layout.for_channel(ch, |i| sum += data[i].to_f64());
        let m = sum * inv;
        let mut sq = 0.0;
        layout.for_channel(ch, |i| {
            let d = data[i].to_f64() - m;
            sq += d * d;
        });
        mu[ch] = m;
        sigma2[ch] = sq * inv;
    }
    Ok((mu, sigma2))
}

/// Per-channel mean of squared elements.
pub fn chi_squared<T: Scalar>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let layout = x.channel_layout("chi_squared")?;
    if layout.count() == 0 {
        return Err(Error::EmptyBatch("chi_squared"));
    }
    let inv = 1.0 / layout.count() as f64;
    let data = x.data();
    Ok((0..layout.c)
        .map(|ch| {
            let mut sq = 0.0;
            layout.for_channel(ch, |i| {
                let v = data[i].to_f64();
                sq += v * v;
            });
            sq * inv
        })
        .collect())
}

/// Backward-pass statistics: `g` is the per-channel mean of `dy`, `psi` the
/// per-channel mean of `y * dy`.
pub fn grad_stats<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    y.expect_same_shape(dy, "grad_stats")?;
    let layout = y.channel_layout("grad_stats")?;
    let inv = 1.0 / layout.count() as f64;
    let (yd, gd) = (y.data(), dy.data());
    let mut g = vec![0.0; layout.c];
    let mut psi = vec![0.0; layout.c];
    for ch in 0..layout.c {
        let (mut sg, mut sp) = (0.0, 0.0);
        layout.for_channel(ch, |i| {
            let d = gd[i].to_f64();
            sg += d;
            sp += yd[i].to_f64() * d;
        });
        g[ch] = sg * inv;
        psi[ch] = sp * inv;
    }
    Ok((g, psi))
}

/// Exponential moving average `value <- momentum * value + (1 - momentum) * obs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub value: Vec<f64>,
    pub momentum: f64,
}

impl EmaState {
    pub fn new(channels: usize, init: f64, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!(
                "EMA momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            value: vec![init; channels],
            momentum,
        })
    }

    /// Rejects mismatched or non-finite observations, leaving the state as it was.
    pub fn update(&mut self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.value.len() {
            return Err(Error::shape(
                "ema_update",
                format!("{} observations for {} channels", obs.len(), self.value.len()),
            ));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ema_update observation"));
        }
        let a = self.momentum;
        for (v, &o) in self.value.iter_mut().zip(obs) {
            *v = a * *v + (1.0 - a) * o;
        }
        Ok(())
    }
}

/// Ring of the last `capacity` per-channel observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmaBuffer {
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl SmaBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("SMA capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self) -> usize {
        self.entries.len()
    }

    pub fn push(&mut self, obs: &[f64]) -> Result<()> {
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sma_push observation"));
        }
        if let Some(first) = self.entries.front() {
            if first.len() != obs.len() {
                return Err(Error::shape(
                    "sma_push",
                    format!("{} observations for {} channels", obs.len(), first.len()),
                ));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(obs.to_vec());
        Ok(())
    }

    /// Mean over the stored entries, oldest first; `None` while empty.
    pub fn mean(&self) -> Option<Vec<f64>> {
        let first = self.entries.front()?;
        let mut acc = vec![0.0; first.len()];
        for entry in &self.entries {
            for (a, &v) in acc.iter_mut().zip(entry) {
                *a += v;
            }
        }
        let inv = self.entries.len() as f64;
        Some(acc.into_iter().map(|s| s / inv).collect())
    }

    pub fn push_and_mean(&mut self, obs: &[f64]) -> Result<Vec<f64>> {
        self.push(obs)?;
        Ok(self.mean().expect("buffer holds the value just pushed"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StatName {
    Mu,
    Sigma2,
    Chi2,
    G,
    Psi,
    Chi2Sma,
    PsiSma,
}

impl StatName {
    pub const ALL: [StatName; 7] = [
        StatName::Mu,
        StatName::Sigma2,
        StatName::Chi2,
        StatName::G,
        StatName::Psi,
        StatName::Chi2Sma,
        StatName::PsiSma,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StatName::Mu => "mu",
            StatName::Sigma2 => "sigma2",
            StatName::Chi2 => "chi2",
            StatName::G => "g",
            StatName::Psi => "psi",
            StatName::Chi2Sma => "chi2_sma",
            StatName::PsiSma => "psi_sma",
        }
    }
}

impl fmt::Display for StatName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StatName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StatName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown statistic name {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: u64,
    pub layer: String,
    pub stat: StatName,
    pub l2norm: f64,
}

impl Serialize for StatName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for StatName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Append-only log of per-iteration statistic norms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatTrace {
    records: Vec<TraceRecord>,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Population standard deviation of a series; zero for fewer than two values.
pub fn series_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Median of the finite values, averaging the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

impl StatTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Append the channel-wise L2 norm of each named statistic.
    pub fn record(&mut self, iter: u64, layer: &str, stats: &[(StatName, &[f64])]) -> Result<()> {
        if let Some(last) = self.records.last() {
            if iter < last.iter {
                return Err(Error::Format(format!(
                    "trace is ordered by iteration: {iter} after {}",
                    last.iter
                )));
            }
        }
        for &(stat, values) in stats {
            self.records.push(TraceRecord {
                iter,
                layer: layer.to_string(),
                stat,
                l2norm: l2_norm(values),
            });
        }
        Ok(())
    }

    pub fn push_record(&mut self, record: TraceRecord) -> Result<()> {
        if self.records.last().is_some_and(|l| record.iter < l.iter) {
            return Err(Error::Format("trace records out of iteration order".into()));
        }
        self.records.push(record);
        Ok(())
    }

    /// Norm series for one (layer, statistic) pair, in iteration order.
    pub fn series(&self, layer: &str, stat: StatName) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.layer == layer && r.stat == stat)
            .map(|r| r.l2norm)
            .collect()
    }
}

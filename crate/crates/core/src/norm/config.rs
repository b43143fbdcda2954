use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormForm {
    /// `(x - mu) / sigma`
    Vanilla,
    /// `x / chi`, with `chi^2` the second raw moment.
    Modified,
}

/// Where a statistic comes from: the current batch, the exponential moving
/// average, or the simple moving average over recent batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatSource {
    Batch,
    Ema,
    Sma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Bn,
    Brn,
    Mabn,
}

/// One point of the ablation matrix.
///
/// `bp_source` picks the statistics the layer actually normalizes with and
/// differentiates through (`mu`/`sigma2` or `chi2` in the forward pass, `g` and
/// `psi` in the backward pass). `fp_source` picks the statistics the forward
/// output is renormalized towards with the clipped `r` (and `d`) correction.
/// When the two agree no correction is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormVariantConfig {
    pub form: NormForm,
    pub fp_source: StatSource,
    pub bp_source: StatSource,
    pub momentum: f64,
    pub sma_capacity: usize,
    /// `r` is clipped to `[1/clip_bound, clip_bound]`.
    pub clip_bound: f64,
    /// `d` is clipped to `[-brn_d_max, brn_d_max]`.
    pub brn_d_max: f64,
    /// Iterations during which batch statistics drive both passes.
    pub warmup_iters: u64,
    pub epsilon: f64,
    pub affine: bool,
    /// Subtract the per-output-channel mean from the preceding conv kernel.
    pub centralize_weights: bool,
}

impl Default for NormVariantConfig {
    fn default() -> Self {
        Self::bn()
    }
}

impl NormVariantConfig {
    pub fn bn() -> Self {
        Self {
            form: NormForm::Vanilla,
            fp_source: StatSource::Batch,
            bp_source: StatSource::Batch,
            momentum: 0.9,
            sma_capacity: 16,
            clip_bound: 5.0,
            brn_d_max: 2.5,
            warmup_iters: 0,
            epsilon: 1e-5,
            affine: true,
            centralize_weights: false,
        }
    }

    pub fn brn() -> Self {
        Self {
            fp_source: StatSource::Ema,
            momentum: 0.98,
            warmup_iters: 100,
            ..Self::bn()
        }
    }

    pub fn mabn() -> Self {
        Self {
            form: NormForm::Modified,
            fp_source: StatSource::Ema,
            bp_source: StatSource::Sma,
            momentum: 0.98,
            warmup_iters: 100,
            centralize_weights: true,
            ..Self::bn()
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Bn => Self::bn(),
            Preset::Brn => Self::brn(),
            Preset::Mabn => Self::mabn(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return fail(format!("norm.momentum must lie in (0, 1), got {}", self.momentum));
        }
        if self.sma_capacity == 0 {
            return fail("norm.sma_capacity must be at least 1".into());
        }
        if !(self.clip_bound >= 1.0 && self.clip_bound.is_finite()) {
            return fail(format!(
                "norm.clip_bound must be finite and >= 1, got {}",
                self.clip_bound
            ));
        }
        if !(self.brn_d_max >= 0.0 && self.brn_d_max.is_finite()) {
            return fail(format!(
                "norm.brn_d_max must be finite and >= 0, got {}",
                self.brn_d_max
            ));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return fail(format!("norm.epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        Ok(())
    }

    /// Vanilla form with moving-average backward statistics collapses in
    /// published ablations; such runs are flagged in reports.
    pub fn reported_divergent(&self) -> bool {
        self.form == NormForm::Vanilla && self.bp_source == StatSource::Sma
    }

    pub fn label(&self) -> String {
        let src = |s: StatSource| match s {
            StatSource::Batch => "batch",
            StatSource::Ema => "ema",
            StatSource::Sma => "sma",
        };
        let form = match self.form {
            NormForm::Vanilla => "vanilla",
            NormForm::Modified => "modified",
        };
        format!("{form}/fp={}/bp={}", src(self.fp_source), src(self.bp_source))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_ablation_rows() {
        let bn = NormVariantConfig::bn();
        assert_eq!(
            (bn.form, bn.fp_source, bn.bp_source),
            (NormForm::Vanilla, StatSource::Batch, StatSource::Batch)
        );
        let brn = NormVariantConfig::brn();
        assert_eq!(
            (brn.form, brn.fp_source, brn.bp_source),
            (NormForm::Vanilla, StatSource::Ema, StatSource::Batch)
        );
        let mabn = NormVariantConfig::mabn();
        assert_eq!(
            (mabn.form, mabn.fp_source, mabn.bp_source),
            (NormForm::Modified, StatSource::Ema, StatSource::Sma)
        );
        assert_eq!((bn.momentum, brn.momentum, mabn.momentum), (0.9, 0.98, 0.98));
        assert!(mabn.centralize_weights && !bn.centralize_weights);
        for c in [bn, brn, mabn] {
            c.validate().unwrap();
            assert!(!c.reported_divergent());
        }
    }

    #[test]
    fn vanilla_with_sma_backward_is_flagged_but_valid() {
        let cfg = NormVariantConfig {
            bp_source: StatSource::Sma,
            ..NormVariantConfig::brn()
        };
        cfg.validate().unwrap();
        assert!(cfg.reported_divergent());
    }

    #[test]
    fn validation_rejects_out_of_range_fields() {
        let base = NormVariantConfig::mabn();
        for bad in [
            NormVariantConfig {
                momentum: 1.0,
                ..base.clone()
            },
            NormVariantConfig {
                sma_capacity: 0,
                ..base.clone()
            },
            NormVariantConfig {
                clip_bound: 0.5,
                ..base.clone()
            },
            NormVariantConfig {
                brn_d_max: -1.0,
                ..base.clone()
            },
            NormVariantConfig {
                epsilon: f64::NAN,
                ..base.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::NormVariantConfig;
use crate::tensor::Precision;
use crate::train::data::DatasetSpec;

/// Step decay: the rate is multiplied by `factor` at each milestone iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<u64>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.1,
            milestones: vec![3000, 4500],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn rate_at(&self, iteration: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.base * self.factor.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.base)));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::Config(format!("decay factor {} outside (0, 1]", self.factor)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Widths and strides of the four conv stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32, 64],
            strides: vec![1, 2, 2, 2],
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config("model needs one stride per conv width".into()));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("model widths and strides must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Samples per weight update.
    pub grad_batch: usize,
    /// Samples per normalization group; must divide `grad_batch`.
    pub norm_batch: usize,
    pub iterations: u64,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub norm: NormVariantConfig,
    pub data: DatasetSpec,
    pub model: ModelSpec,
    /// Evaluate every this many iterations (0: only at the start and end).
    pub eval_every: u64,
    /// Training samples used for the periodic train-error estimate.
    pub train_eval_samples: usize,
    pub precision: Precision,
    /// Indices of the normalization layers whose statistics are traced.
    pub trace_layers: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grad_batch: 32,
            norm_batch: 32,
            iterations: 6000,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            seeds: vec![0],
            norm: NormVariantConfig::default(),
            data: DatasetSpec::default(),
            model: ModelSpec::default(),
            eval_every: 500,
            train_eval_samples: 2000,
            precision: Precision::F32,
            trace_layers: vec![0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grad_batch == 0 || self.norm_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.grad_batch % self.norm_batch != 0 {
            return Err(Error::Config(format!(
                "normalization batch {} does not divide gradient batch {}",
                self.norm_batch, self.grad_batch
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("SGD momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let Some(&bad) = self.trace_layers.iter().find(|&&l| l >= self.model.widths.len()) {
            return Err(Error::Config(format!("trace layer {bad} does not exist")));
        }
        self.lr.validate()?;
        self.norm.validate()?;
        self.data.validate()?;
        self.model.validate()
    }

    pub fn groups(&self) -> usize {
        self.grad_batch / self.norm_batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down_at_milestones() {
        let s = LrSchedule::default();
        assert_eq!(s.rate_at(0), 0.1);
        assert_eq!(s.rate_at(2999), 0.1);
        assert!((s.rate_at(3000) - 0.01).abs() < 1e-15);
        assert!((s.rate_at(4500) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            norm_batch: 3,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lr: LrSchedule {
                milestones: vec![10, 10],
                ..LrSchedule::default()
            },
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            trace_layers: vec![4],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(
            TrainConfig {
                norm_batch: 2,
                ..TrainConfig::default()
            }
            .groups(),
            16
        );
    }
}

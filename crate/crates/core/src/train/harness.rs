use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::split_batch;
use crate::ops::softmax_cross_entropy;
use crate::stats::{StatName, StatTrace};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::train::config::TrainConfig;
use crate::train::data::{synth_dataset, Dataset, LabeledSet, Sampler};
use crate::train::model::{ConvNet, InferMode};
use crate::train::sgd::Sgd;

pub const CHECKPOINT_VERSION: u32 = 1;

const EVAL_CHUNK: usize = 500;
const SAMPLER_SALT: u64 = 0x5eed_5a3b_1e00_0001;

/// Split a gradient batch into contiguous normalization groups.
pub fn split_into_norm_groups<T: Scalar>(batch: &Tensor<T>, norm_batch: usize) -> Result<Vec<Tensor<T>>> {
    split_batch(batch, norm_batch)
}

/// One row of the learning curve. Row 0 holds only the initial evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iter: u64,
    pub loss: Option<f64>,
    pub train_err: Option<f64>,
    pub val_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub label: String,
    pub seed: u64,
    pub grad_batch: usize,
    pub norm_batch: usize,
    pub iterations: u64,
    pub final_train_err: Option<f64>,
    pub final_val_err: Option<f64>,
    pub diverged: bool,
    pub skipped_steps: u64,
    /// The variant is one that published ablations report as collapsing.
    pub reported_divergent: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub summary: RunSummary,
    pub curve: Vec<CurvePoint>,
    pub trace: StatTrace,
}

/// Fraction of misclassified samples among the first `limit` of `set`.
pub fn evaluate<T: Scalar>(model: &ConvNet<T>, set: &LabeledSet, limit: usize, mode: InferMode) -> Result<f64> {
    let n = limit.min(set.len());
    if n == 0 {
        return Err(Error::EmptyBatch("evaluate"));
    }
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, labels) = set.batch::<T>(chunk)?;
        let logits = model.infer(&x, mode)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            if argmax(row) != Some(label) {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / n as f64)
}

fn argmax<T: Scalar>(row: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in row.iter().enumerate() {
        if !v.is_finite() {
            return None;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct TrainState<T> {
    pub format_version: u32,
    pub config: TrainConfig,
    pub seed: u64,
    pub iteration: u64,
    pub diverged: bool,
    pub model: ConvNet<T>,
    pub optimizer: Sgd<T>,
    pub sampler: Sampler,
    pub curve: Vec<CurvePoint>,
    pub trace: StatTrace,
}

pub struct Trainer<T> {
    state: TrainState<T>,
    data: Dataset,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let data = synth_dataset(&config.data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_channels = data.train.images.shape()[1];
        let model = ConvNet::new(&config.model, &config.norm, in_channels, data.classes, &mut rng)?;
        let state = TrainState {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            seed,
            iteration: 0,
            diverged: false,
            model,
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            sampler: Sampler::new(data.train.len(), seed ^ SAMPLER_SALT),
            curve: Vec::new(),
            trace: StatTrace::new(),
        };
        let mut trainer = Self { state, data };
        trainer.record_eval(None)?;
        Ok(trainer)
    }

    /// Continue from a checkpointed state; the dataset is regenerated from its spec.
    pub fn from_state(state: TrainState<T>) -> Result<Self> {
        if state.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                state.format_version
            )));
        }
        state.config.validate()?;
        let data = synth_dataset(&state.config.data)?;
        Ok(Self { state, data })
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn into_state(self) -> TrainState<T> {
        self.state
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn is_done(&self) -> bool {
        self.state.diverged || self.state.iteration >= self.state.config.iterations
    }

    fn eval_due(&self) -> bool {
        let cfg = &self.state.config;
        let t = self.state.iteration;
        t == cfg.iterations || (cfg.eval_every > 0 && t % cfg.eval_every == 0)
    }

    fn record_eval(&mut self, loss: Option<f64>) -> Result<()> {
        let (train_err, val_err) = if self.state.diverged {
            (None, None)
        } else if self.state.iteration == 0 || self.eval_due() {
            let m = &self.state.model;
            let limit = self.state.config.train_eval_samples;
            (
                Some(evaluate(m, &self.data.train, limit, InferMode::Separate)?),
                Some(evaluate(m, &self.data.val, usize::MAX, InferMode::Separate)?),
            )
        } else {
            (None, None)
        };
        self.state.curve.push(CurvePoint {
            iter: self.state.iteration,
            loss,
            train_err,
            val_err,
        });
        Ok(())
    }

    fn record_trace(&mut self) -> Result<()> {
        let t = self.state.iteration;
        for &l in &self.state.config.trace_layers {
            let Some(snap) = self.state.model.norms()[l].snapshot() else {
                continue;
            };
            let b = &snap.batch;
            self.state.trace.record(
                t,
                &format!("norm{l}"),
                &[
                    (StatName::Mu, &b.mu),
                    (StatName::Sigma2, &b.sigma2),
                    (StatName::Chi2, &b.chi2),
                    (StatName::G, &b.g),
                    (StatName::Psi, &b.psi),
                    (StatName::Chi2Sma, &snap.chi2_sma),
                    (StatName::PsiSma, &snap.psi_sma),
                ],
            )?;
        }
        Ok(())
    }

    /// One weight update on a fresh gradient batch.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        let cfg = &self.state.config;
        let (grad_batch, norm_batch) = (cfg.grad_batch, cfg.norm_batch);
        let lr = cfg.lr.rate_at(self.state.iteration);
        let indices = self.state.sampler.next_batch(grad_batch);
        let (x, labels) = self.data.train.batch::<T>(&indices)?;
        let (logits, tape) = self.state.model.forward(&x, norm_batch)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
        let grads = self.state.model.backward(tape, &dlogits)?;
        let finite = loss.is_finite() && grads.all_finite();
        if finite {
            let slices = grads.slices();
            self.state.optimizer.step(self.state.model.params_mut(), &slices, lr)?;
        } else {
            self.state.diverged = true;
        }
        self.state.iteration += 1;
        self.record_trace()?;
        self.record_eval(Some(loss))
    }

    pub fn run_until(&mut self, iteration: u64) -> Result<()> {
        while !self.is_done() && self.state.iteration < iteration {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(u64::MAX)
    }

    pub fn report(&self) -> RunReport {
        let s = &self.state;
        let last_eval = s.curve.iter().rev().find(|p| p.val_err.is_some());
        let (final_train_err, final_val_err) = match last_eval {
            Some(p) if !s.diverged => (p.train_err, p.val_err),
            _ => (None, None),
        };
        RunReport {
            summary: RunSummary {
                format_version: CHECKPOINT_VERSION,
                label: s.config.norm.label(),
                seed: s.seed,
                grad_batch: s.config.grad_batch,
                norm_batch: s.config.norm_batch,
                iterations: s.iteration,
                final_train_err,
                final_val_err,
                diverged: s.diverged,
                skipped_steps: s.optimizer.skipped(),
                reported_divergent: s.config.norm.reported_divergent(),
            },
            curve: s.curve.clone(),
            trace: s.trace.clone(),
        }
    }
}

fn run_typed<T: Scalar>(config: &TrainConfig, seed: u64) -> Result<RunReport> {
    let mut trainer = Trainer::<T>::new(config, seed)?;
    trainer.run()?;
    Ok(trainer.report())
}

/// Train one seed to completion at the configured precision.
pub fn train(config: &TrainConfig, seed: u64) -> Result<RunReport> {
    match config.precision {
        Precision::F32 => run_typed::<f32>(config, seed),
        Precision::F64 => run_typed::<f64>(config, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::NormVariantConfig;
    use crate::train::config::{LrSchedule, ModelSpec};
    use crate::train::data::DatasetSpec;

    fn toy(norm: NormVariantConfig, norm_batch: usize, iterations: u64) -> TrainConfig {
        TrainConfig {
            grad_batch: 8,
            norm_batch,
            iterations,
            lr: LrSchedule {
                base: 0.05,
                milestones: vec![],
                factor: 0.1,
            },
            norm,
            data: DatasetSpec {
                n_train: 64,
                n_val: 40,
                image_size: 8,
                ..DatasetSpec::default()
            },
            model: ModelSpec {
                widths: vec![4, 8],
                strides: vec![1, 2],
            },
            eval_every: 3,
            train_eval_samples: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn groups_are_contiguous_slices() {
        let x = Tensor::<f64>::from_fn(&[32, 2], |i| i as f64);
        let g = split_into_norm_groups(&x, 2).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g[3].data(), &[12.0, 13.0, 14.0, 15.0]);
        assert!(split_into_norm_groups(&x, 5).is_err());
    }

    #[test]
    fn zero_iterations_yield_the_initial_evaluation() {
        let r = train(&toy(NormVariantConfig::bn(), 8, 0), 1).unwrap();
        assert_eq!(r.curve.len(), 1);
        assert_eq!(r.curve[0].iter, 0);
        assert!(r.curve[0].loss.is_none() && r.curve[0].val_err.is_some());
        assert!(r.trace.is_empty());
        assert_eq!(r.summary.final_val_err, r.curve[0].val_err);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = toy(NormVariantConfig::mabn(), 2, 7);
        let a = train(&cfg, 3).unwrap();
        let b = train(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.curve.len(), 8);
        assert!(a.curve[7].val_err.is_some() && a.curve[2].val_err.is_none());
        assert!(!a.summary.diverged);
        assert_ne!(a, train(&cfg, 4).unwrap());
    }

    #[test]
    fn one_group_matches_ungrouped_training() {
        // A single group of the whole batch is the ungrouped path.
        let cfg = toy(NormVariantConfig::bn(), 8, 4);
        let mut t = Trainer::<f64>::new(&cfg, 0).unwrap();
        let mut u = Trainer::<f64>::new(&cfg, 0).unwrap();
        t.run().unwrap();
        for _ in 0..4 {
            let idx = u.state.sampler.next_batch(8);
            let (x, labels) = u.data.train.batch::<f64>(&idx).unwrap();
            let groups = split_into_norm_groups(&x, 8).unwrap();
            assert_eq!(groups.len(), 1);
            let (logits, tape) = u.state.model.forward(&groups[0], x.shape()[0]).unwrap();
            let (_, dl) = softmax_cross_entropy(&logits, &labels).unwrap();
            let grads = u.state.model.backward(tape, &dl).unwrap();
            let lr = cfg.lr.rate_at(u.state.iteration);
            u.state
                .optimizer
                .step(u.state.model.params_mut(), &grads.slices(), lr)
                .unwrap();
            u.state.iteration += 1;
        }
        let a = serde_json::to_string(&t.state.model).unwrap();
        let b = serde_json::to_string(&u.state.model).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn folded_evaluation_agrees() {
        let mut t = Trainer::<f64>::new(&toy(NormVariantConfig::brn(), 2, 5), 2).unwrap();
        t.run().unwrap();
        let m = &t.state.model;
        let (x, _) = t.data.val.batch::<f64>(&(0..40).collect::<Vec<_>>()).unwrap();
        let a = m.infer(&x, InferMode::Separate).unwrap();
        let b = m.infer(&x, InferMode::Folded).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        assert_eq!(
            evaluate(m, &t.data.val, 40, InferMode::Separate).unwrap(),
            evaluate(m, &t.data.val, 40, InferMode::Folded).unwrap()
        );
    }

    #[test]
    fn evaluation_edge_cases() {
        let t = Trainer::<f32>::new(&toy(NormVariantConfig::bn(), 8, 0), 0).unwrap();
        assert!(evaluate(&t.state.model, &t.data.val, 0, InferMode::Separate).is_err());
        assert_eq!(argmax(&[0.1f32, 0.7, 0.2]), Some(1));
        assert_eq!(argmax(&[f32::NAN, 0.7]), None);
    }

    #[test]
    fn resume_from_serialized_state_is_bit_identical() {
        let cfg = toy(NormVariantConfig::mabn(), 2, 9);
        let mut whole = Trainer::<f32>::new(&cfg, 5).unwrap();
        whole.run().unwrap();

        let mut first = Trainer::<f32>::new(&cfg, 5).unwrap();
        first.run_until(4).unwrap();
        let json = serde_json::to_string(first.state()).unwrap();
        let state: TrainState<f32> = serde_json::from_str(&json).unwrap();
        let mut resumed = Trainer::from_state(state).unwrap();
        resumed.run().unwrap();
        assert_eq!(whole.report(), resumed.report());
        assert_eq!(
            serde_json::to_string(whole.state()).unwrap(),
            serde_json::to_string(resumed.state()).unwrap()
        );
    }
}

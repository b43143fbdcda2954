//! Small-scale supervised training under any normalization variant, with
//! grouped normalization batches, learning curves, and statistic traces.

pub mod config;
pub mod data;
pub mod harness;
pub mod model;
pub mod sgd;

pub use config::{LrSchedule, ModelSpec, TrainConfig};
pub use data::{synth_dataset, Dataset, DatasetSpec, LabeledSet, Sampler};
pub use harness::{
    evaluate, split_into_norm_groups, train, CurvePoint, RunReport, RunSummary, TrainState, Trainer, CHECKPOINT_VERSION,
};
pub use model::{ConvNet, ConvNetGrads, InferMode, Tape};
pub use sgd::Sgd;

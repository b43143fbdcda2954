//! Batch normalization, batch renormalization, the second-moment
//! ("modified") normalizer, and moving-average batch normalization, all
//! driven by one [`NormVariantConfig`].

mod centralize;
mod config;
mod functional;
mod layer;

pub use centralize::{centralize_backward, weight_centralize, CentralizedConvWeights};
pub use config::{NormForm, NormVariantConfig, Preset, StatSource};
pub use functional::{
    bn_backward, bn_forward, brn_forward, clip, modified_backward, modified_forward, norm_backward_with, normalize,
    NormCache, NormGrads, NormOutput, Standardizer,
};
pub(crate) use layer::split_batch;
pub use layer::{build_variant, FinalizedNorm, LayerStatSnapshot, MovingStats, NormLayer, NormLayerGrads};

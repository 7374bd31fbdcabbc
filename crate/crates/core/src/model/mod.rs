//! The four-branch network: point encoder, patch aligner, cross-attention
//! fusion, predictor and the symmetric forward pass.

mod config;
mod forward;
mod layers;
mod params;

pub use config::{FusionVariant, MergeMode, ModelConfig, MomentumBranch};
pub use forward::{
    forward_pocca, online_embeddings, prepare_views, ForwardOptions, ForwardOutput, ViewConfig, ViewPair,
};
pub use layers::{encode_batch, stack_points, Attended, BnMode, BnRecord, Net};
pub use params::{
    init_attention, init_cross_attention, init_encoder, init_predictor, ModelParams, ALIGNER, CA_ONLINE, CA_TARGET,
    ENCODER_LAYERS, ENCODER_ONLINE, ENCODER_TARGET, GROUP_NAMES, PREDICTOR,
};

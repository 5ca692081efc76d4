//! ViT-MoE encoder, single-query transformer decoder, per-taxon regression
//! heads and the contrastive predictor head.
//!
//! Parameters are bound into a graph lazily by name, so a forward pass for
//! one taxon never records the other taxon's experts or heads.

mod config;
mod forward;
mod state;

pub use config::{NetworkConfig, TaxonDims};
pub use forward::{
    decoder_graph, encoder_graph, heads_graph, moe_ffn_graph, network_forward_graph, patch_embed_graph, patchify, predict, EncoderVars,
    PredictedParams, PredictionVars,
};
pub use state::{NetworkState, WeightInit, INIT_STD};

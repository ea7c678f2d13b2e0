//! Three-stream quality-completion network: a shared self-attention
//! reference encoder, reference-conditioned cross-attention query and
//! partial-map encoders, per-stage fusion, and a mirrored decoder that
//! produces a dense quality map.

mod blocks;
mod checkpoint;
mod config;
mod forward;
mod params;

pub use blocks::{
    channel_attention, conv_fuse, dual_gated_block, sinusoidal_pe, spatial_attention, AttnVars,
    BlockVars, CaVars, ParamBinding,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{NetConfig, PeKind};
pub use forward::{forward, forward_traced, ForwardTrace, StageFeatures};
pub use params::{
    block_param_count, branch_prefix, ca_hidden, param_count, param_specs, EncoderBranch,
    ModelParams, ParamClass, ParamSpec,
};

//! The two-branch enhancement network: per-branch encoder, RA blocks with
//! separable self-attention, cross-branch interaction, gated decoder, and a
//! time-domain merge stage.

pub mod blocks;
mod config;
pub mod merge;
mod net;

pub use config::{attn_width, ModelConfig, ENCODER_KERNEL, MERGE_KERNEL, POINTWISE, RESIDUAL_KERNEL};
pub use net::{BlockInternals, Branch, BranchOut, ForwardOptions, NetOut, Overrides, SnNet};

//! Fully connected networks with exact backpropagation and Adam.

mod adam;
pub mod checkpoint;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{
    clip_global_norm, xavier_init, Dense, ForwardCache, GradientSet, LayerGradient, Mlp, NetShape,
};

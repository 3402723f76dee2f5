//! Minimal CPU network kernels with hand-derived backward passes.
//!
//! Everything is per-sample (`C × H × W`); batching is done by the callers by
//! accumulating parameter gradients across samples.

mod adam;
mod layers;
mod scalar;
mod tensor;
mod unet;

pub use adam::Adam;
pub use layers::{
    silu, silu_backward, Conv2d, GroupNorm, Module, Param, ResBlock, NORM_GROUPS,
};
pub use scalar::Real;
pub use tensor::FeatureMap;
pub use unet::{ResUNet, UNetCache, UNetLayout, UNetOutput};

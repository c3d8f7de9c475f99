//! Minimal CPU tensor and layer library with explicit backward passes.
//!
//! Activations are laid out `[channels][batch][height][width]`; a batched
//! convolution is one GEMM against the im2col matrix. Parameters live in
//! one flat buffer described by a [`ParamLayout`]; gradients use a buffer of
//! the same shape.

mod layers;
mod params;
mod real;
mod tensor;

pub use layers::{
    area_downsample, concat_channels, relu_backward, relu_forward, split_channels, Conv2d,
    ConvCache, GroupNorm, GroupNormCache, Resize,
};
pub use params::{Init, ParamEntry, ParamLayout, Slot};
pub use real::{matmul, Real};
pub use tensor::Tensor;

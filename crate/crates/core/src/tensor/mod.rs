//! Dense tensors, reverse-mode autodiff, layers and the Adam optimizer.

pub mod graph;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod params;
#[allow(clippy::module_inception)]
mod tensor;

pub use graph::{Gradients, Graph, NodeId, ParamGrads};
pub use nn::{
    derive_seed, det_rng, multi_head_attention, Attention, BatchNorm, DetRng, DropoutSpec,
    LayerNorm, Linear, Masks, MultiHeadAttention,
};
pub use optim::{AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

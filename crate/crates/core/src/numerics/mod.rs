//! Deterministic differentiable numeric substrate: f64 tensors, an autodiff
//! tape, parameterized kernels, AdamW, and finite-difference verification.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tensor;

pub use adam::{adam_step, cosine_lr, AdamParams, AdamState};
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use nn::{
    glorot_uniform, mlp_forward, multi_head_attention, AttentionSpec, LnParams, MlpSpec, ParamStore,
};
pub use tensor::{layer_norm_slice, sinpos_encode, softmax_slice, Tensor};

//! Differentiable tensor operations, optimizer, schedule and gradient checks.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{CeTarget, Graph, Var};
pub use kernels::{layer_norm, multi_head_attention, softmax, AttentionWeights, AttnSegment};
pub use optim::{adamw_step, AdamWConfig, OptimState, Schedule};
pub use params::{Gradients, Init, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

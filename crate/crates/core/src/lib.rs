//! Layer-wise relevance propagation restricted to syntactic and positional
//! attention heads, for small post-layernorm Transformer encoders.
//!
//! The pipeline is: [`model::Model::forward`] records a trace,
//! [`model::Model::backward_attention_grads`] differentiates a target logit
//! down to every attention matrix, [`lrp::propagate`] pushes relevance from
//! the output back to per-head attention relevance, and
//! [`attribution::explain`] gates that relevance with a [`headmask::HeadMask`]
//! before a gradient-weighted rollout produces token scores.

pub mod attribution;
pub mod cli;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod headmask;
pub mod lrp;
pub mod model;
pub mod numerics;
pub mod render;

pub use error::{Error, Result};
pub use numerics::Tensor;

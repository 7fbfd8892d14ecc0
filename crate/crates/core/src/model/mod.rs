//! Post-layernorm Transformer encoder with trace capture and a manual
//! backward pass down to the attention matrices.

mod backward;
mod config;
mod forward;
mod weights;

pub use backward::AttentionGrads;
pub use config::{ModelConfig, Task};
pub use forward::{AttentionOverride, BlockTrace, ForwardTrace, Model, Prediction, Target};
pub use weights::{load_weights, save_weights, tensor_layout, BlockWeights, DType, ModelWeights};

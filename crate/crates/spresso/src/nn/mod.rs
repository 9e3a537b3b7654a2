//! Minimal differentiable-computation layer: dense layers, multi-head
//! attention with rotary positions, normalization, pooling, AdamW and a
//! finite-difference gradient checker. No general autodiff graph; each layer
//! carries its own analytic backward.

pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod dense;
pub mod gradcheck;
pub mod norm;
pub mod param;
pub mod pool;
pub mod rope;
pub mod tensor;

pub use attention::Mha;
pub use block::TransformerBlock;
pub use dense::{lora_apply, Dense, LoraAdapter};
pub use gradcheck::grad_check;
pub use norm::RmsNorm;
pub use param::{adamw_step, AdamConfig, Param, ParamGroup, ParamStore, Parameterized};
pub use pool::avg_pool_time;
pub use rope::RopeTable;
pub use tensor::{sc, Scalar, Tensor};

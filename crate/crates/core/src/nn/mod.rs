//! Minimal differentiable tensor machinery backing the denoiser.

pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

//! Reverse-mode autodiff engine, layers and optimizer.

pub mod check;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use params::{gaussian_tensor, Group, Param, ParamId, ParamStore};
pub use tensor::{matmul, Tensor};

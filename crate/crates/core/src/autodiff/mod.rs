//! Minimal reverse-mode automatic differentiation over dense tensors,
//! with exactly the layers the detection networks need.

mod adam;
mod checkpoint;
mod conv;
mod dense;
mod float;
pub mod gradcheck;
mod graph;
mod params;
mod softmax;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use conv::ConvGeom;
pub use dense::{BatchStats, BnMode};
pub use float::Float;
pub(crate) use graph::sigmoid;
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{BufferId, Group, Init, Layout, ParamCount, ParamId, ParamSpec, ParamStore};
pub use tensor::Tensor;

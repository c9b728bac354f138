//! Tensor math, reverse-mode autodiff, layers, and the optimizer.

pub mod adam;
pub mod layers;
pub mod linalg;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use layers::{Layer, LayerSpec};
pub use tape::{Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;

//! Minimal layer library with reverse-mode gradients, SGD with momentum and a
//! single-file checkpoint format.

pub mod checkpoint;
pub mod gemm;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;

pub use layers::{GradMode, Layer, LayerSpec, Param, ParamRole};
pub use loss::{argmax_rows, LossKind, Targets};
pub use model::{Model, ModelSpec};
pub use optim::{LrSchedule, Sgd};
pub use tensor::Tensor;

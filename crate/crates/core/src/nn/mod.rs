//! Minimal neural-network engine: per-sample tensors, layers with paired forward/backward,
//! losses, and optimizers. There is no autograd graph; every layer kind implements its own
//! gradient.

pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_check, CheckLoss, GradCheckReport};
pub use layer::LayerSpec;
pub use loss::{loss_cross_entropy, loss_huber, CrossEntropy};
pub use network::{count_operations, count_parameters, Chain, ForwardCache, Head, Mode, Network};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{ParamEntry, ParamLayout, ParamStore};
pub use tensor::Tensor;

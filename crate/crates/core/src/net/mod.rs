//! Differentiable micro-network, multi-task losses and training.

pub mod bmn;
pub mod checkpoint;
pub mod decode;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;

pub use bmn::{BatchMixtureNorm, Block, NormMode};
pub use decode::{decode, Decoded};
pub use loss::{loss_total, LossBreakdown, Prediction, TaskWeights};
pub use model::{BlockSpec, MicroNet, NetConfig};
pub use optim::Sgd;
pub use tensor::{Param, Real, Tensor4};

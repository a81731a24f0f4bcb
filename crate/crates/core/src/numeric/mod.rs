//! Deterministic numeric kernel: seeded streams, dense tensors, a
//! feed-forward network with analytic gradients, losses and SGD.

pub mod loss;
pub mod mlp;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use loss::{cross_entropy, mean_squared_error, softmax, LossGrad};
pub use mlp::{Activation, Dense, Mlp};
pub use optim::{LrSchedule, Sgd};
pub use rng::Rng;
pub use tensor::Tensor;

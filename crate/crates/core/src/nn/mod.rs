//! Minimal deterministic neural-network engine: dense/conv/pool/ReLU layers,
//! reverse-mode gradients, softmax cross-entropy and momentum SGD.
//!
//! Everything is `f32` and single-threaded. Networks are plain values, so a
//! shared `&Network` may serve any number of concurrent forward passes.

mod gemm;
mod layer;
mod loss;
mod network;
mod optim;
mod tensor;

pub use layer::{Conv2d, Dense, Layer, MaxPool2d};
pub use loss::{argmax, softmax, softmax_cross_entropy, NUM_CLASSES};
pub use network::{ActivationTrace, GradientSet, Network};
pub use optim::{sgd_step, TrainConfig};
pub use tensor::Tensor;

//! Minimal reverse-mode automatic differentiation.
//!
//! Values are dense f64 tensors in an arena owned by a [`Tape`]; every
//! primitive pushes a node with a closure computing its vector–Jacobian
//! product. Backward walks nodes in reverse creation order (reverse
//! topological order, since inputs always precede outputs) and visits each
//! node exactly once. The layer set is what the networks here need: padded
//! convolution, batch normalization, fully-connected, elementwise
//! activations, and the loss heads — pooling is deliberately absent.

mod gemm;
pub mod gradcheck;
pub mod ops;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{adam_step, cosine_lr, AdamState, BoundParams, CosineSchedule, ParamStore};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;

/// Elementwise activation kinds supported by [`ops::activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActKind {
    Relu,
    Softplus,
    Tanh,
    Identity,
}

/// Batch-norm running statistics for one layer.
#[derive(Clone, Debug)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Fraction of the old running value kept per update.
    pub momentum: f64,
}

impl BnState {
    pub fn new(channels: usize, momentum: f64) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
        }
    }
}

/// Train/eval switch for layers with batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

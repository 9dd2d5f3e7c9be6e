//! Differentiable primitives used by the residual network.
//!
//! Each operation is a pair of free functions: a forward pass that returns
//! its output together with whatever the backward pass needs, and a backward
//! pass that maps the upstream gradient to gradients of every input.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use conv::{conv1d, conv1d_backward, conv_output_len, Conv1dGrads};
pub use dense::{dense, dense_backward, DenseGrads};
pub use dropout::{dropout, dropout_backward, DropoutMask};
pub use gradcheck::{finite_difference_check, GradCheck, GradCheckReport};
pub use loss::{bce_backward, bce_logits_backward, bce_loss, PROB_CLAMP};
pub use norm::{
    batchnorm1d_backward, batchnorm1d_infer, batchnorm1d_train, update_running_stats, BatchNormCache, BatchNormGrads,
    BatchStats,
};
pub use pool::{maxpool1d, maxpool1d_backward, MaxPoolCache};

/// Whether an operation runs with training behaviour (batch statistics,
/// active dropout) or inference behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

//! A small CPU deep-learning engine for residual squeeze-and-excitation image
//! classifiers: tensors, tape-based reverse-mode autodiff, layer builders with
//! exact parameter accounting, Adam with selective weight decay, a folder-per-
//! class data pipeline, classification metrics, and a training loop with
//! best-validation checkpointing.

pub mod autograd;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use tensor::{Scalar, Tensor, TensorError};

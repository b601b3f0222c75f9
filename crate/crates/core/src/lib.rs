//! Teacher→student knowledge distillation on a small CPU autodiff engine.
//!
//! The crate provides channel distillation (matching per-channel global
//! average pooled activations between teacher and student), guided knowledge
//! distillation (KL on teacher-correct samples only) and an early-decay
//! schedule on the channel term, together with everything needed to run them
//! end to end: tensors with reverse-mode differentiation, a small residual CNN
//! family, SGD with step learning-rate decay, CIFAR/synthetic data, a trainer
//! with checkpoints, and naive reference implementations used for checking.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kv;
pub mod losses;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

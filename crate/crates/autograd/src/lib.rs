//! Dense tensors with reverse-mode gradients, plus the neural building blocks
//! (linear, convolution, layer norm, multi-head attention) and the AdamW
//! optimizer used to train the placement model.

mod error;
mod float;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use float::Float;
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{ConvSpec, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, ParamGroup};
pub use params::{Bound, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

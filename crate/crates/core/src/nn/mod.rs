//! Minimal CNN engine: tensors, the six layer kinds, analytic backprop,
//! softmax cross-entropy, SGD and Adam.

mod config;
mod gradcheck;
mod loss;
mod model;
mod optim;
mod params;
mod real;
mod tensor;

pub use config::{LayerSpec, ModelConfig};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, REL_ERR_FLOOR};
pub use loss::{argmax_rows, softmax, softmax_cross_entropy};
pub use model::{backward, forward, ActivationTrace, NORM_EPS};
pub use optim::{adam_step, sgd_step, AdamState, OptimState, OptimizerKind};
pub use params::{Gradients, ParamSet, Parameters};
pub use real::{DType, Real};
pub use tensor::Tensor;

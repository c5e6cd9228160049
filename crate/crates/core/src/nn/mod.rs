//! Minimal dense-network engine: reverse-mode gradients over feed-forward
//! stacks, momentum SGD, parameter EMA and finite-difference checking.

pub mod cosine;
pub mod dense;
pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod scalar;

pub use dense::{Activation, DenseNet, LayerSpec, Mode, Trace};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use matrix::Matrix;
pub use optim::Sgd;
pub use params::{ema_update, Param, ParamSet};
pub use scalar::{Dual, Scalar};

//! Differentiable building blocks: tape autograd, convolution, batch norm,
//! activations, pooling, parameter storage and a gradient-check harness.

pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod norm;
pub mod ops;
pub mod params;
pub mod pool;
pub mod tape;

pub use conv::{conv2d, ConvGeom, ConvSpec};
pub use gradcheck::{grad_check, grad_check_at, grad_check_input, GradCheckOptions, GradCheckReport};
pub use layers::{act, depthwise_separable, Act, BatchNorm, Conv};
pub use norm::{batchnorm_eval, batchnorm_train, BatchStats, BN_EPS};
pub use params::{Ctx, ParamInit, ParamKind, ParamStore};
pub use pool::{pool, PoolKind};
pub use tape::{Gradients, Tape, Var};

//! Pulmonary nodule detection at desk scale.
//!
//! The crate bundles a small reverse-mode autograd ([`nnkit`]), CBAM and
//! pixel-gate attention ([`attention`]), Kolmogorov–Arnold spline layers
//! ([`kan`]), a reparameterizable C2f_RepViTCAMF backbone ([`backbone`]), a
//! multi-scale fusion neck with an anchor-free head ([`neckhead`]), detection
//! metrics ([`metrics`]), lung-parenchyma segmentation ([`imaging`]) and the
//! synthetic-data training pipeline ([`datatrain`]).

pub mod attention;
pub mod backbone;
pub mod datatrain;
pub mod error;
pub mod imaging;
pub mod kan;
pub mod metrics;
pub mod neckhead;
pub mod nnkit;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

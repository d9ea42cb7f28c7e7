//! A compact reverse-mode automatic differentiation engine over dense `f64`
//! tensors.
//!
//! The engine is built for small convolutional networks trained on a single
//! CPU core. Its one unusual capability is that backward passes are
//! themselves recorded as graph operations when requested, so gradients of
//! gradients work. That is what a gradient penalty needs.
//!
//! ```
//! use mogan_autograd::{grad, Tensor};
//!
//! let x = Tensor::param(vec![3.0], &[1]);
//! let y = x.square().sum_all();
//! let dy = grad(&y, &[&x], true).remove(0);
//! assert_eq!(dy.data(), &[6.0]);
//! let d2y = grad(&dy.sum_all(), &[&x], false).remove(0);
//! assert_eq!(d2y.data(), &[2.0]);
//! ```

mod conv;
pub mod gradcheck;
mod linalg;
mod ops;
pub mod resample;
mod tensor;

pub use conv::{Conv2dGeometry, DeformGeometry};
pub use resample::SparseMap;
pub use tensor::{grad, grad_with_seed, is_grad_enabled, no_grad, Backward, BackwardCtx, Tensor};

//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; every operation appends a node. [`Tape::grad`]
//! walks the tape backwards and, when asked to, records the backward pass as
//! ordinary tape operations so that gradient-dependent expressions (such as a
//! gradient-norm penalty) can themselves be differentiated.
//!
//! Everything is generic over [`Scalar`], implemented for `f32` (training)
//! and `f64` (finite-difference verification).

mod adam;
pub mod check;
mod error;
pub mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;
pub mod weights;

pub use adam::{Adam, AdamConfig};
pub use error::{Error, Result};
pub use kernels::Conv2dConfig;
pub use params::Params;
pub use scalar::Scalar;
pub use tape::{Resampler, Tape, Var};
pub use tensor::Tensor;

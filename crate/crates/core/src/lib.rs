//! Probabilistic temporal motion model for 2-D image sequences.
//!
//! An encoder maps each `(I_0, I_t)` pair to a Gaussian latent code, a
//! non-causal dilated temporal convolutional network regularises the codes
//! into a motion matrix using the normalised time, and a decoder conditioned
//! on `I_0` turns each column into a stationary velocity field whose
//! exponential is a diffeomorphic deformation. Training randomly swaps
//! posterior codes for prior draws (temporal dropout) so the temporal network
//! learns to fill missing frames.
//!
//! All numeric code is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the common choices.

// argument guards are written `!(x > 0.0)` on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod applications;
pub mod autodiff;
pub mod deformation;
mod error;
pub mod image;
pub mod losses;
pub mod networks;
mod scalar;
pub mod selftest;
pub mod seqio;
pub mod synthetic;
mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// 32-bit image.
pub type Image32 = image::Image<f32>;
/// 32-bit image sequence, the training precision.
pub type Sequence32 = image::ImageSequence<f32>;
/// 32-bit velocity field.
pub type Velocity32 = deformation::VelocityField<f32>;
/// 32-bit deformation field.
pub type Deformation32 = deformation::DeformationField<f32>;
/// 32-bit parameter store.
pub type Params32 = autodiff::ParamStore<f32>;
/// 64-bit parameter store used by gradient checks.
pub type Params64 = autodiff::ParamStore<f64>;
/// 32-bit trained model.
pub type Model32 = networks::MotionModel<f32>;
/// 64-bit graph.
pub type Graph64 = autodiff::Graph<f64>;

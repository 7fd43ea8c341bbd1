//! Multi-modal cross-attention transformer for accelerated MR imaging.
//!
//! The crate bundles everything needed to train and verify the model at
//! desk scale:
//!
//! - [`autodiff`]: dense tensors on a reverse-mode tape, plus a
//!   finite-difference gradient checker;
//! - [`kspace`]: centered orthonormal FFTs, column undersampling masks,
//!   zero filling and k-space truncation;
//! - [`model`]: the dual-branch network (conv heads, multi-scale patch
//!   tokens, cross transformer encoders, conv tails) and its L1 loss;
//! - [`data`] and [`train`]: synthetic paired-modality phantoms, SGD
//!   training, evaluation, checkpoints and ablation runs;
//! - [`metrics`]: PSNR, SSIM, NMSE and the paired t-test.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod image;
pub mod io;
pub mod kspace;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use image::Image;
pub use kspace::ComplexGrid;
pub use params::{ParamId, ParamStore, ParamVars};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type ComplexGrid32 = ComplexGrid<f32>;
pub type ComplexGrid64 = ComplexGrid<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type MTrans32 = model::MTrans<f32>;
pub type MTrans64 = model::MTrans<f64>;

//! MR acquisition model: centered orthonormal FFTs, column masks, zero
//! filling and k-space truncation.

mod degrade;
mod fft;
mod grid;
mod mask;

pub use degrade::{degrade_lr, degrade_lr_complex, normalize, truncate_kspace, undersample, zero_fill};
pub use fft::{fft2, ifft2};
pub use grid::ComplexGrid;
pub use mask::{center_columns, default_center_fraction, make_mask, MaskKind, SamplingMask};

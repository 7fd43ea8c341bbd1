//! Acquisition degradations: column undersampling with zero filling, and
//! k-space truncation for low-resolution inputs.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kspace::fft::{check_pow2, ifft2};
use crate::kspace::{ComplexGrid, SamplingMask};
use crate::scalar::Scalar;

/// `ŷ = M ⊙ y` with the column mask replicated over rows.
pub fn undersample<T: Scalar>(y: &ComplexGrid<T>, mask: &SamplingMask) -> Result<ComplexGrid<T>> {
    if mask.width() != y.width() {
        return Err(Error::shape("undersample", &[y.height(), y.width()], &[mask.width()]));
    }
    let w = y.width();
    let zero = Complex::new(T::zero(), T::zero());
    let values = y
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.columns[i % w] { v } else { zero })
        .collect();
    ComplexGrid::new(y.height(), w, values)
}

/// Magnitude of the inverse transform of (undersampled) k-space.
pub fn zero_fill<T: Scalar>(y_hat: &ComplexGrid<T>) -> Result<Image<T>> {
    Ok(ifft2(y_hat)?.magnitude())
}

/// Central `(H/s)×(W/s)` block of centered k-space.
pub fn truncate_kspace<T: Scalar>(y: &ComplexGrid<T>, s: usize) -> Result<ComplexGrid<T>> {
    let (h, w) = (y.height(), y.width());
    if s == 0 || !s.is_power_of_two() || h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!(
            "scale {s} must be a power of two dividing {h}×{w}"
        )));
    }
    let (lh, lw) = (h / s, w / s);
    let (y0, x0) = (h / 2 - lh / 2, w / 2 - lw / 2);
    let mut values = Vec::with_capacity(lh * lw);
    for yy in 0..lh {
        for xx in 0..lw {
            values.push(y.get(y0 + yy, x0 + xx));
        }
    }
    ComplexGrid::new(lh, lw, values)
}

/// Complex low-resolution image from truncated k-space.
///
/// The orthonormal inverse at the reduced size multiplies a constant image
/// by `s`; the result is divided by `s` so intensities are preserved
/// (a constant image `c` maps to `c`).
pub fn degrade_lr_complex<T: Scalar>(y: &ComplexGrid<T>, s: usize) -> Result<ComplexGrid<T>> {
    check_pow2(y.height(), y.width())?;
    let cropped = truncate_kspace(y, s)?;
    Ok(ifft2(&cropped)?.scale(T::one() / T::lit(s as f64)))
}

/// Magnitude of [`degrade_lr_complex`].
pub fn degrade_lr<T: Scalar>(y: &ComplexGrid<T>, s: usize) -> Result<Image<T>> {
    Ok(degrade_lr_complex(y, s)?.magnitude())
}

/// Divides by the maximum; returns the scaled image and that maximum.
pub fn normalize<T: Scalar>(img: &Image<T>) -> Result<(Image<T>, T)> {
    let max = img.max();
    if !(max > T::zero()) || !max.is_finite() {
        return Err(Error::invalid("cannot normalize an image without positive values"));
    }
    Ok((img.map(|v| v / max), max))
}

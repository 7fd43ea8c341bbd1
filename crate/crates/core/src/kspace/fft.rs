//! Centered, orthonormal 2-D FFT.
//!
//! `fft2(x) = fftshift(F(ifftshift(x))) / sqrt(HW)`: the zero frequency sits
//! at `(H/2, W/2)` and the transform is unitary, so `ifft2` is its adjoint.

use num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::kspace::ComplexGrid;
use crate::scalar::Scalar;

pub fn fft2<T: Scalar>(x: &ComplexGrid<T>) -> Result<ComplexGrid<T>> {
    transform(x, FftDirection::Forward)
}

pub fn ifft2<T: Scalar>(y: &ComplexGrid<T>) -> Result<ComplexGrid<T>> {
    transform(y, FftDirection::Inverse)
}

pub(crate) fn check_pow2(height: usize, width: usize) -> Result<()> {
    if !height.is_power_of_two() || !width.is_power_of_two() {
        return Err(Error::invalid(format!(
            "grid size {height}×{width} is not a power of two"
        )));
    }
    Ok(())
}

fn transform<T: Scalar>(x: &ComplexGrid<T>, dir: FftDirection) -> Result<ComplexGrid<T>> {
    let (h, w) = (x.height(), x.width());
    check_pow2(h, w)?;
    let mut planner = FftPlanner::<T>::new();

    let mut buf = shift(x.values(), h, w);
    planner.plan_fft(w, dir).process(&mut buf);

    let mut cols = transpose(&buf, h, w);
    planner.plan_fft(h, dir).process(&mut cols);
    let buf = transpose(&cols, w, h);

    let norm = T::one() / T::lit((h * w) as f64).sqrt();
    let values = shift(&buf, h, w).into_iter().map(|c| c * norm).collect();
    ComplexGrid::new(h, w, values)
}

/// Circular shift by half the size in each axis. For even (power-of-two)
/// sizes this is its own inverse, so it serves as both fftshift and ifftshift.
fn shift<T: Scalar>(v: &[Complex<T>], h: usize, w: usize) -> Vec<Complex<T>> {
    let (sh, sw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(v.len());
    for y in 0..h {
        let src_y = (y + sh) % h;
        for x in 0..w {
            out.push(v[src_y * w + (x + sw) % w]);
        }
    }
    out
}

fn transpose<T: Scalar>(v: &[Complex<T>], h: usize, w: usize) -> Vec<Complex<T>> {
    let mut out = vec![Complex::new(T::zero(), T::zero()); v.len()];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = v[y * w + x];
        }
    }
    out
}

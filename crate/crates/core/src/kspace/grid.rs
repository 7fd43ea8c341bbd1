use num_complex::Complex;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// `height × width` complex array holding an image or its centered k-space.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid<T> {
    height: usize,
    width: usize,
    values: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexGrid<T> {
    pub fn new(height: usize, width: usize, values: Vec<Complex<T>>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "{} values for a {height}×{width} grid",
                values.len()
            )));
        }
        Ok(ComplexGrid {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexGrid {
            height,
            width,
            values: vec![Complex::new(T::zero(), T::zero()); height * width],
        }
    }

    pub fn from_real(img: &Image<T>) -> Self {
        ComplexGrid {
            height: img.height(),
            width: img.width(),
            values: img.data().iter().map(|&v| Complex::new(v, T::zero())).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[Complex<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.values
    }

    pub fn get(&self, y: usize, x: usize) -> Complex<T> {
        self.values[y * self.width + x]
    }

    /// `Σ |v|²`.
    pub fn energy(&self) -> T {
        self.values.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn magnitude(&self) -> Image<T> {
        Image::new(
            self.height,
            self.width,
            self.values.iter().map(|c| c.norm()).collect(),
        )
        .expect("grid dims")
    }

    pub fn scale(&self, s: T) -> Self {
        ComplexGrid {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&c| c * s).collect(),
        }
    }

    /// Largest elementwise difference; `∞` when the sizes differ.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if (self.height, self.width) != (other.height, other.width) {
            return T::infinity();
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(T::zero(), T::max)
    }
}

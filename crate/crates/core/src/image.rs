//! Real-valued 2-D images.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major `height × width` real image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "{} pixels for a {height}×{width} image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, T::zero())
    }

    pub fn constant(height: usize, width: usize, v: T) -> Self {
        Image {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest elementwise difference; `∞` when the sizes differ.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if (self.height, self.width) != (other.height, other.width) {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// `[1×H×W]` tensor view for the network.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("image dims")
    }

    /// Accepts `[H×W]` or `[1×H×W]`.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            &[h, w] | &[1, h, w] => Image::new(h, w, t.data().to_vec()),
            other => Err(Error::invalid(format!("expected a single-channel image, got shape {other:?}"))),
        }
    }

    /// Pixel replication by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Self {
        let (h, w) = (self.height * factor, self.width * factor);
        Image::from_fn(h, w, |y, x| self.get(y / factor, x / factor))
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`),
    /// clamping at the borders.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let axis = |out: usize, src: usize, i: usize| -> (usize, usize, T) {
            let pos = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, T::lit(pos - lo as f64))
        };
        Image::from_fn(height, width, |y, x| {
            let (y0, y1, fy) = axis(height, self.height, y);
            let (x0, x1, fx) = axis(width, self.width, x);
            let top = self.get(y0, x0) * (T::one() - fx) + self.get(y0, x1) * fx;
            let bottom = self.get(y1, x0) * (T::one() - fx) + self.get(y1, x1) * fx;
            top * (T::one() - fy) + bottom * fy
        })
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_two_by_two_to_four_by_four() {
        // Half-pixel centers: output centers sit at -0.25, 0.25, 0.75, 1.25 in source space.
        let img = Image::new(2, 2, vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let up = img.resize_bilinear(4, 4);
        let row0 = [0.0, 0.25, 0.75, 1.0];
        for x in 0..4 {
            assert!((up.get(0, x) - row0[x]).abs() < 1e-12);
            assert!((up.get(3, x) - (row0[x] + 2.0)).abs() < 1e-12);
        }
        assert!((up.get(1, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let c = Image::constant(3, 5, 0.4f64);
        assert!(c.resize_bilinear(7, 2).data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
        let r = Image::from_fn(4, 4, |y, x| (y * 4 + x) as f64);
        assert_eq!(r.resize_bilinear(4, 4), r);
    }

    #[test]
    fn nearest_replicates() {
        let img = Image::new(1, 2, vec![1.0f32, 2.0]).unwrap();
        let up = img.upsample_nearest(2);
        assert_eq!(up.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}

//! Bicubic resampling and full-reference quality metrics.

mod bicubic;
mod quality;

pub use bicubic::{bicubic_resize, upsample_tensor};
pub use quality::{psnr, shave, ssim};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return shape_err(
                "image",
                format!("{height}x{width} image with {} samples", data.len()),
            );
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Rectangular window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return shape_err(
                "crop",
                format!(
                    "{height}x{width} at ({top},{left}) outside {}x{}",
                    self.height, self.width
                ),
            );
        }
        Ok(Self::from_fn(height, width, |y, x| self.get(top + y, left + x)))
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from(*v).expect("finite cast")).collect(),
        }
    }

    /// View as a `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone()).expect("valid image")
    }

    /// Image from a tensor holding exactly one `H x W` plane.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return shape_err("image", format!("tensor {s:?} is not a single plane"));
        }
        Self::new(s[s.len() - 2], s[s.len() - 1], t.data().to_vec())
    }
}

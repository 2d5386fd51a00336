use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Image;

const A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel.
fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output taps `(first source index, normalized weights)` along one axis.
///
/// Source indices past the border are clamped, so the first index may be
/// negative and is resolved by the caller.
struct Taps {
    start: Vec<isize>,
    weights: Vec<Vec<f64>>,
}

fn taps(src: usize, dst: usize) -> Taps {
    let ratio = src as f64 / dst as f64;
    // Widen the kernel when shrinking so every source pixel contributes.
    let support = ratio.max(1.0);
    let mut start = Vec::with_capacity(dst);
    let mut weights = Vec::with_capacity(dst);
    for i in 0..dst {
        let center = (i as f64 + 0.5) * ratio - 0.5;
        let lo = (center - 2.0 * support).floor() as isize;
        let hi = (center + 2.0 * support).ceil() as isize;
        let mut w: Vec<f64> = (lo..=hi).map(|j| cubic((j as f64 - center) / support)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        start.push(lo);
        weights.push(w);
    }
    Taps { start, weights }
}

#[allow(clippy::too_many_arguments)]
fn resample_axis<T: Scalar>(
    src: &[T],
    len: usize,
    lines: usize,
    stride_line: usize,
    stride_px: usize,
    t: &Taps,
    dst_line: usize,
    dst_px: usize,
    out: &mut [T],
) {
    for line in 0..lines {
        for (i, w) in t.weights.iter().enumerate() {
            let mut acc = T::zero();
            for (o, &wk) in w.iter().enumerate() {
                let j = (t.start[i] + o as isize).clamp(0, len as isize - 1) as usize;
                acc += T::lit(wk) * src[line * stride_line + j * stride_px];
            }
            out[line * dst_line + i * dst_px] = acc;
        }
    }
}

/// Resize with separable Catmull-Rom interpolation (`a = -0.5`).
///
/// Sample centres are aligned at half-pixel offsets, border samples are
/// clamped, and downscaling widens the kernel by the scale ratio. The result
/// is clamped to `[0, 1]`.
pub fn bicubic_resize<T: Scalar>(img: &Image<T>, out_h: usize, out_w: usize) -> Result<Image<T>> {
    if out_h == 0 || out_w == 0 {
        return shape_err("bicubic_resize", format!("output size {out_h}x{out_w}"));
    }
    let (h, w) = (img.height(), img.width());
    let mut rows = vec![T::zero(); h * out_w];
    resample_axis(img.data(), w, h, w, 1, &taps(w, out_w), out_w, 1, &mut rows);
    let mut out = vec![T::zero(); out_h * out_w];
    resample_axis(&rows, h, out_w, 1, out_w, &taps(h, out_h), 1, out_w, &mut out);
    let unit = |v: T| v.max(T::zero()).min(T::one());
    Image::new(out_h, out_w, out.into_iter().map(unit).collect())
}

/// Bicubic `x s` upsampling of every plane of an `[N, C, H, W]` tensor.
pub fn upsample_tensor<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 4 || s == 0 {
        return shape_err("upsample", format!("input {shape:?}, scale {s}"));
    }
    let (h, w) = (shape[2], shape[3]);
    let mut data = Vec::with_capacity(x.numel() * s * s);
    for plane in x.data().chunks(h * w) {
        let img = Image::new(h, w, plane.to_vec())?;
        data.extend(bicubic_resize(&img, h * s, w * s)?.into_data());
    }
    Tensor::new(vec![shape[0], shape[1], h * s, w * s], data)
}

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, Graph, Tensor, Var};

/// Beyond this many bandwidths from an edge the sigmoid is 0 or 1 to within
/// `exp(-40)`.
const SATURATION: f64 = 40.0;

/// Soft-histogram binning on the pixel range `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub bins: usize,
    /// Sigmoid bandwidth `W`; defaults to half a bin.
    pub bandwidth: f64,
    /// Side of the square, non-overlapping patches.
    pub patch_size: usize,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self { bins: 256, bandwidth: 0.5 / 256.0, patch_size: 8 }
    }
}

impl HistogramConfig {
    /// Histogram with the given bandwidth, in units of the bin length.
    pub fn with_relative_bandwidth(fraction: f64) -> Self {
        let d = Self::default();
        Self { bandwidth: fraction / d.bins as f64, ..d }
    }

    pub fn bin_length(&self) -> f64 {
        1.0 / self.bins as f64
    }

    /// Bin centres `(k + 0.5) L`.
    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins).map(|k| (k as f64 + 0.5) * self.bin_length()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || self.patch_size == 0 || !(self.bandwidth > 0.0) {
            return Err(Error::Config(format!("invalid histogram config {self:?}")));
        }
        Ok(())
    }
}

/// Lower-edge sigmoids `σ((y - kL) / W)` for the interior edges
/// `k = 1 .. bins - 1`, written to `out[k - 1]`.
///
/// The first and last bins are open-ended, so a pixel always carries unit
/// mass. Saturated edges are written as exact 0 or 1.
fn edge_sigmoids<T: Scalar>(y: T, cfg: &HistogramConfig, out: &mut [T]) {
    let y = y.to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
    let (l, w) = (cfg.bin_length(), cfg.bandwidth);
    for (i, o) in out.iter_mut().enumerate() {
        let z = (y - (i + 1) as f64 * l) / w;
        *o = if z > SATURATION {
            T::one()
        } else if z < -SATURATION {
            T::zero()
        } else {
            sigmoid(T::lit(z))
        };
    }
}

/// Normalized soft histogram of one patch.
///
/// Bin `k` receives `σ((y - kL)/W) - σ((y - (k+1)L)/W)` from each pixel `y`,
/// a smooth rectangle over `[kL, (k+1)L)`; the outermost edges are taken at
/// infinity. Pixels are clamped to `[0, 1]` first.
pub fn soft_histogram<T: Scalar>(patch: &[T], cfg: &HistogramConfig) -> Vec<T> {
    let mut h = vec![T::zero(); cfg.bins];
    let mut s = vec![T::zero(); cfg.bins - 1];
    for &y in patch {
        edge_sigmoids(y, cfg, &mut s);
        for k in 0..cfg.bins {
            let lower = if k == 0 { T::one() } else { s[k - 1] };
            let upper = if k + 1 == cfg.bins { T::zero() } else { s[k] };
            h[k] += lower - upper;
        }
    }
    let n = T::lit(patch.len() as f64);
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Cumulative soft histogram of one patch, bins `0 .. bins - 1`.
///
/// The last entry is identically 1 and is omitted. Entry `j` equals
/// `mean(1 - σ((y - (j+1)L)/W))`.
fn soft_cdf<T: Scalar>(pixels: &[T], cfg: &HistogramConfig, scratch: &mut [T]) -> Vec<T> {
    let mut cdf = vec![T::zero(); cfg.bins - 1];
    for &y in pixels {
        edge_sigmoids(y, cfg, scratch);
        for (c, &s) in cdf.iter_mut().zip(scratch.iter()) {
            *c += T::one() - s;
        }
    }
    let n = T::lit(pixels.len() as f64);
    cdf.iter_mut().for_each(|v| *v /= n);
    cdf
}

/// Geometry of the patch tiling of an `[N, C, H, W]` tensor.
#[derive(Clone, Copy)]
struct Tiling {
    h: usize,
    w: usize,
    p: usize,
    planes: usize,
    rows: usize,
    cols: usize,
}

impl Tiling {
    fn new(shape: &[usize], p: usize) -> Result<Self> {
        let [n, c, h, w] = shape else {
            return shape_err("emd", format!("expected [N, C, H, W], got {shape:?}"));
        };
        if *h < p || *w < p {
            return shape_err("emd", format!("{h}x{w} image holds no {p}x{p} patch"));
        }
        Ok(Self { h: *h, w: *w, p, planes: n * c, rows: h / p, cols: w / p })
    }

    fn count(&self) -> usize {
        self.planes * self.rows * self.cols
    }

    /// Flat indices of the pixels of patch `i`; the bottom/right remainder
    /// is never visited.
    fn pixels(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let per_plane = self.rows * self.cols;
        let (plane, r, c) = (i / per_plane, (i % per_plane) / self.cols, i % self.cols);
        let base = plane * self.h * self.w + r * self.p * self.w + c * self.p;
        (0..self.p).flat_map(move |dy| (0..self.p).map(move |dx| base + dy * self.w + dx))
    }

    fn gather<T: Scalar>(&self, data: &[T], i: usize) -> Vec<T> {
        self.pixels(i).map(|j| data[j]).collect()
    }
}

/// Per-patch soft histograms of every `patch_size x patch_size` tile.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftHistogram<T> {
    pub bins: usize,
    /// `[patches * bins]`, one normalized histogram per tile in raster order.
    pub values: Vec<T>,
}

impl<T: Scalar> SoftHistogram<T> {
    pub fn of(x: &Tensor<T>, cfg: &HistogramConfig) -> Result<Self> {
        cfg.validate()?;
        let tiles = Tiling::new(x.shape(), cfg.patch_size)?;
        let values = (0..tiles.count())
            .flat_map(|i| soft_histogram(&tiles.gather(x.data(), i), cfg))
            .collect();
        Ok(Self { bins: cfg.bins, values })
    }

    pub fn patches(&self) -> usize {
        self.values.len() / self.bins
    }

    pub fn patch(&self, i: usize) -> &[T] {
        &self.values[i * self.bins..(i + 1) * self.bins]
    }
}

impl<T: Scalar> Graph<T> {
    /// Patch-wise histogram loss: the squared distance between cumulative
    /// soft histograms of aligned tiles, summed over tiles and bins and
    /// divided by the element count of `a`.
    pub fn patchwise_emd(&mut self, a: Var, b: Var, cfg: &HistogramConfig) -> Result<Var> {
        cfg.validate()?;
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) {
            return shape_err("emd", format!("{shape:?} vs {:?}", self.shape(b)));
        }
        let tiles = Tiling::new(&shape, cfg.patch_size)?;
        let cfg = *cfg;
        let (xa, xb) = (self.value(a), self.value(b));
        // Per-tile CDF differences, kept for the backward pass.
        let diffs: Vec<Vec<T>> = (0..tiles.count())
            .into_par_iter()
            .map_init(
                || vec![T::zero(); cfg.bins - 1],
                |scratch, i| {
                    let ca = soft_cdf(&tiles.gather(xa.data(), i), &cfg, scratch);
                    let cb = soft_cdf(&tiles.gather(xb.data(), i), &cfg, scratch);
                    ca.iter().zip(&cb).map(|(&p, &q)| p - q).collect()
                },
            )
            .collect();
        let m = T::lit(xa.numel() as f64);
        let total: T = diffs.iter().map(|d| d.iter().map(|&v| v * v).sum::<T>()).sum();
        let out = Tensor::scalar(total / m);
        let need = [self.requires_grad(a), self.requires_grad(b)];

        self.push(
            "emd",
            out,
            &[a, b],
            Box::new(move |g, p, _| {
                // d/dy of CDF_j is -σ'(z_{j+1}) / (W P²) for each tile pixel y.
                let area = (tiles.p * tiles.p) as f64;
                let coef = g.item() * T::lit(2.0 / (cfg.bandwidth * area)) / m;
                let grad_of = |x: &Tensor<T>, sign: T| -> Tensor<T> {
                    let per_tile: Vec<Vec<T>> = (0..tiles.count())
                        .into_par_iter()
                        .map_init(
                            || vec![T::zero(); cfg.bins - 1],
                            |s, i| {
                                tiles
                                    .pixels(i)
                                    .map(|j| {
                                        let y = x.data()[j];
                                        if y <= T::zero() || y >= T::one() {
                                            return T::zero();
                                        }
                                        edge_sigmoids(y, &cfg, s);
                                        let dot: T = s
                                            .iter()
                                            .zip(&diffs[i])
                                            .map(|(&v, &d)| d * v * (T::one() - v))
                                            .sum();
                                        -sign * coef * dot
                                    })
                                    .collect()
                            },
                        )
                        .collect();
                    let mut out = Tensor::zeros(x.shape().to_vec());
                    for (i, vals) in per_tile.into_iter().enumerate() {
                        for (j, v) in tiles.pixels(i).zip(vals) {
                            out.data_mut()[j] = v;
                        }
                    }
                    out
                };
                vec![
                    need[0].then(|| grad_of(p[0], T::one())),
                    need[1].then(|| grad_of(p[1], -T::one())),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_cover_unit_interval() {
        let c = HistogramConfig::default().centers();
        assert_eq!(c.len(), 256);
        assert_eq!(c[0], 0.5 / 256.0);
        assert_eq!(c[255], 255.5 / 256.0);
    }

    #[test]
    fn mass_is_one_even_at_range_ends() {
        let cfg = HistogramConfig::default();
        for y in [0.0f64, 1.0, 1e-4, 0.5] {
            let h = soft_histogram(&[y], &cfg);
            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(h.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cdf_agrees_with_histogram_prefix_sums() {
        let cfg = HistogramConfig::default();
        let pixels: Vec<f64> = (0..64).map(|i| (i as f64 * 0.618).fract()).collect();
        let h = soft_histogram(&pixels, &cfg);
        let mut scratch = vec![0.0; 255];
        let cdf = soft_cdf(&pixels, &cfg, &mut scratch);
        let mut acc = 0.0;
        for j in 0..255 {
            acc += h[j];
            assert!((acc - cdf[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn tiling_crops_remainder() {
        let t = Tiling::new(&[1, 1, 10, 17], 8).unwrap();
        assert_eq!(t.count(), 2);
        let second: Vec<usize> = t.pixels(1).collect();
        assert_eq!(second[0], 8);
        assert_eq!(second[63], 7 * 17 + 15);
        assert!(Tiling::new(&[1, 1, 7, 17], 8).is_err());
    }
}

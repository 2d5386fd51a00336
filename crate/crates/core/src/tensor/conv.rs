use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

use super::{spectral, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Patch matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose stride-1 tap `kx` lands inside the
    /// input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.ow);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow).max(lo);
        (lo, hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_cols(kx);
                            if lo == hi {
                                line.fill(T::zero());
                                continue;
                            }
                            line[..lo].fill(T::zero());
                            line[hi..].fill(T::zero());
                            line[lo..hi].copy_from_slice(&src[lo + kx - self.pad..hi + kx - self.pad]);
                            continue;
                        }
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Position-major patch matrix `[positions, k]`, the transpose of
    /// [`ConvGeom::im2col`].
    fn im2row<T: Scalar>(&self, x: &[T], rows: &mut [T]) {
        let k = self.k();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let dst = &mut rows[(oy * self.ow + ox) * k..][..k];
                let x0 = (ox * self.stride) as isize - self.pad as isize;
                let lo = (-x0).clamp(0, self.kw as isize) as usize;
                let hi = (self.w as isize - x0).clamp(lo as isize, self.kw as isize) as usize;
                for ci in 0..self.cin {
                    for ky in 0..self.kh {
                        let seg = &mut dst[(ci * self.kh + ky) * self.kw..][..self.kw];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo == hi {
                            seg.fill(T::zero());
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        let start = (x0 + lo as isize) as usize;
                        seg[..lo].fill(T::zero());
                        seg[hi..].fill(T::zero());
                        seg[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_cols(kx);
                            if lo == hi {
                                continue;
                            }
                            let dst = &mut dst[lo + kx - self.pad..hi + kx - self.pad];
                            let line = &src[oy * self.ow + lo..oy * self.ow + hi];
                            dst.iter_mut().zip(line).for_each(|(d, &v)| *d += v);
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// 2-D cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
    ///
    /// Lowered to a patch matrix times the flattened kernel per sample.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("input {xs:?}, weight {ws:?}"));
        }
        if xs[1] != ws[1] {
            return shape_err(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            );
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [ws[0]] {
                return shape_err("conv2d", format!("bias {:?}", self.value(b).shape()));
            }
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input"));
        }
        let geom = ConvGeom {
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let n = xs[0];
        let (k, p) = (geom.k(), geom.positions());
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = bias.map(|b| self.value(b).data());
        let in_len = geom.cin * h * w;

        let per_sample: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|b| {
                let xb = &xd[b * in_len..(b + 1) * in_len];
                let mut out = vec![T::zero(); geom.cout * p];
                let mut scratch;
                let col: &[T] = if geom.is_pointwise() {
                    xb
                } else {
                    scratch = vec![T::zero(); k * p];
                    geom.im2col(xb, &mut scratch);
                    &scratch
                };
                T::gemm(geom.cout, k, p, T::one(), wd, (k as isize, 1), col, (p as isize, 1),
                    T::zero(), &mut out, (p as isize, 1));
                if let Some(bd) = bd {
                    for (co, row) in out.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v += bd[co]);
                    }
                }
                out
            })
            .collect();
        let out = Tensor::new(vec![n, geom.cout, geom.oh, geom.ow], per_sample.concat())?;

        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.push(
            "conv2d",
            out,
            &parents,
            Box::new(move |g, par, _| {
                let (xd, wd, gd) = (par[0].data(), par[1].data(), g.data());
                let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
                    .into_par_iter()
                    .map(|b| {
                        let gb = &gd[b * geom.cout * p..(b + 1) * geom.cout * p];
                        let xb = &xd[b * in_len..(b + 1) * in_len];
                        let mut gw = vec![T::zero(); geom.cout * k];
                        let mut gx = vec![T::zero(); in_len];
                        if geom.is_pointwise() {
                            T::gemm(geom.cout, p, k, T::one(), gb, (p as isize, 1), xb, (1, p as isize),
                                T::zero(), &mut gw, (k as isize, 1));
                            T::gemm(k, geom.cout, p, T::one(), wd, (1, k as isize), gb, (p as isize, 1),
                                T::zero(), &mut gx, (p as isize, 1));
                        } else {
                            let mut col = vec![T::zero(); k * p];
                            geom.im2row(xb, &mut col);
                            T::gemm(geom.cout, p, k, T::one(), gb, (p as isize, 1), &col, (k as isize, 1),
                                T::zero(), &mut gw, (k as isize, 1));
                            T::gemm(k, geom.cout, p, T::one(), wd, (1, k as isize), gb, (p as isize, 1),
                                T::zero(), &mut col, (p as isize, 1));
                            geom.col2im(&col, &mut gx);
                        }
                        (gx, gw)
                    })
                    .collect();
                let mut gw_total = vec![T::zero(); geom.cout * k];
                let mut gx_all = Vec::with_capacity(n * in_len);
                for (gx, gw) in parts {
                    gx_all.extend_from_slice(&gx);
                    gw_total.iter_mut().zip(&gw).for_each(|(a, &b)| *a += b);
                }
                let mut grads = vec![
                    Some(Tensor::new(par[0].shape().to_vec(), gx_all).expect("shape")),
                    Some(Tensor::new(par[1].shape().to_vec(), gw_total).expect("shape")),
                ];
                if has_bias {
                    let mut gbias = vec![T::zero(); geom.cout];
                    for b in 0..n {
                        for (co, acc) in gbias.iter_mut().enumerate() {
                            let row = &gd[(b * geom.cout + co) * p..][..p];
                            *acc += row.iter().copied().sum::<T>();
                        }
                    }
                    grads.push(Some(Tensor::new(vec![geom.cout], gbias).expect("shape")));
                }
                grads
            }),
        )
    }

    /// Position-lambda convolution: `[N, u, v, H, W]` values with a
    /// `[k, u, 1, r, r]` kernel give `[N, k, v, H, W]`.
    ///
    /// The kernel spans one step along `v` and `r x r` spatially with
    /// "same" padding, so this is a 2-D convolution applied independently to
    /// every value channel.
    pub fn conv3d_lambda(&mut self, values: Var, kernel: Var) -> Result<Var> {
        let vs = self.value(values).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if vs.len() != 5 || ks.len() != 5 {
            return shape_err("conv3d_lambda", format!("values {vs:?}, kernel {ks:?}"));
        }
        let (n, u, v, h, w) = (vs[0], vs[1], vs[2], vs[3], vs[4]);
        let (k, r) = (ks[0], ks[3]);
        if ks[1] != u || ks[2] != 1 || ks[4] != r {
            return shape_err("conv3d_lambda", format!("kernel {ks:?} for {u} value heads"));
        }
        if r % 2 == 0 {
            return Err(Error::Config(format!("position kernel size {r} must be odd")));
        }
        if spectral::worthwhile(h, w, r) {
            let plan = Arc::new(spectral::Plan::new(h, w, r));
            let dims = (n, u, v, k);
            let out = spectral::forward(&plan, self.value(values).data(), self.value(kernel).data(), dims);
            let out = Tensor::new(vec![n, k, v, h, w], out)?;
            return self.push(
                "conv3d_lambda",
                out,
                &[values, kernel],
                Box::new(move |g, par, _| {
                    let (gv, gk) = spectral::backward(&plan, par[0].data(), par[1].data(), g.data(), dims);
                    vec![
                        Some(Tensor::new(par[0].shape().to_vec(), gv).expect("shape")),
                        Some(Tensor::new(par[1].shape().to_vec(), gk).expect("shape")),
                    ]
                }),
            );
        }
        let per_slice = self.permute(values, &[0, 2, 1, 3, 4])?;
        let per_slice = self.reshape(per_slice, &[n * v, u, h, w])?;
        let k2d = self.reshape(kernel, &[k, u, r, r])?;
        let y = self.conv2d(per_slice, k2d, None, 1, (r - 1) / 2)?;
        let y = self.reshape(y, &[n, v, k, h, w])?;
        self.permute(y, &[0, 2, 1, 3, 4])
    }
}

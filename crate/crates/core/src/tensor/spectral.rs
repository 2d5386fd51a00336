//! Frequency-domain evaluation of the position-lambda convolution.
//!
//! A `r x r` "same" cross-correlation over an `h x w` map costs `r^2` MACs
//! per output; with zero padding to `P >= n + (r - 1) / 2` on each axis the
//! circular correlation equals the linear one, so forward and both
//! gradients become pointwise products of 2-D spectra.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

type C64 = Complex<f64>;

/// Smallest `2^a 3^b 5^c` not below `n`.
fn good_size(n: usize) -> usize {
    (n..)
        .find(|&m| {
            let mut m = m;
            for p in [2, 3, 5] {
                while m % p == 0 {
                    m /= p;
                }
            }
            m == 1
        })
        .expect("unbounded search")
}

/// Whether the spectral path beats im2col for this geometry.
pub(crate) fn worthwhile(h: usize, w: usize, r: usize) -> bool {
    r >= 9 && h.min(w) >= 16
}

pub(crate) struct Plan {
    h: usize,
    w: usize,
    r: usize,
    ph: usize,
    pw: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Plan {
    pub(crate) fn new(h: usize, w: usize, r: usize) -> Self {
        let c = (r - 1) / 2;
        let (ph, pw) = (good_size((h + c).max(r)), good_size((w + c).max(r)));
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            r,
            ph,
            pw,
            row_fwd: planner.plan_fft_forward(pw),
            row_inv: planner.plan_fft_inverse(pw),
            col_fwd: planner.plan_fft_forward(ph),
            col_inv: planner.plan_fft_inverse(ph),
        }
    }

    fn len(&self) -> usize {
        self.ph * self.pw
    }

    /// Spectrum of a real `rows x cols` block placed at the origin, stored
    /// column-major (`[pw][ph]`).
    fn forward<T: Scalar>(&self, x: &[T], rows: usize, cols: usize) -> Vec<C64> {
        let (ph, pw) = (self.ph, self.pw);
        let mut buf = vec![C64::default(); rows * pw];
        for y in 0..rows {
            for (d, s) in buf[y * pw..][..cols].iter_mut().zip(&x[y * cols..][..cols]) {
                d.re = s.to_f64().unwrap_or(0.0);
            }
        }
        self.row_fwd.process(&mut buf);
        // rows >= `rows` are zero and stay zero under the row transform
        let mut spec = vec![C64::default(); ph * pw];
        for y in 0..rows {
            for xk in 0..pw {
                spec[xk * ph + y] = buf[y * pw + xk];
            }
        }
        self.col_fwd.process(&mut spec);
        spec
    }

    /// Real part of the inverse transform at rows `(row0 + i) mod ph` and
    /// columns `(col0 + j) mod pw`, for an `rows x cols` window.
    fn inverse(&self, mut spec: Vec<C64>, row0: isize, col0: isize, rows: usize, cols: usize) -> Vec<f64> {
        let (ph, pw) = (self.ph, self.pw);
        self.col_inv.process(&mut spec);
        let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
        let mut buf = vec![C64::default(); rows * pw];
        for i in 0..rows {
            let y = wrap(row0 + i as isize, ph);
            for xk in 0..pw {
                buf[i * pw + xk] = spec[xk * ph + y];
            }
        }
        self.row_inv.process(&mut buf);
        let norm = 1.0 / (ph * pw) as f64;
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(buf[i * pw + wrap(col0 + j as isize, pw)].re * norm);
            }
        }
        out
    }

    /// Spectra of every `[k, u]` kernel slice.
    fn kernel_spectra<T: Scalar>(&self, kernel: &[T], k: usize, u: usize) -> Vec<Vec<C64>> {
        let rr = self.r * self.r;
        (0..k * u).map(|i| self.forward(&kernel[i * rr..(i + 1) * rr], self.r, self.r)).collect()
    }
}

/// `out[b, ki, vi] = sum_u corr(kernel[ki, u], values[b, u, vi])` for values
/// `[n, u, v, h, w]` and kernel `[k, u, r, r]`, giving `[n, k, v, h, w]`.
pub(crate) fn forward<T: Scalar>(
    plan: &Plan,
    values: &[T],
    kernel: &[T],
    (n, u, v, k): (usize, usize, usize, usize),
) -> Vec<T> {
    let (h, w, hw) = (plan.h, plan.w, plan.h * plan.w);
    let c = ((plan.r - 1) / 2) as isize;
    let ek = plan.kernel_spectra(kernel, k, u);
    let slices: Vec<Vec<Vec<f64>>> = (0..n * v)
        .into_par_iter()
        .map(|s| {
            let (b, vi) = (s / v, s % v);
            let vs: Vec<Vec<C64>> = (0..u)
                .map(|ui| plan.forward(&values[((b * u + ui) * v + vi) * hw..][..hw], h, w))
                .collect();
            (0..k)
                .map(|ki| {
                    let mut acc = vec![C64::default(); plan.len()];
                    for ui in 0..u {
                        for ((a, e), x) in acc.iter_mut().zip(&ek[ki * u + ui]).zip(&vs[ui]) {
                            *a += e.conj() * x;
                        }
                    }
                    plan.inverse(acc, -c, -c, h, w)
                })
                .collect()
        })
        .collect();
    let mut out = vec![T::zero(); n * k * v * hw];
    for (s, per_k) in slices.into_iter().enumerate() {
        let (b, vi) = (s / v, s % v);
        for (ki, img) in per_k.into_iter().enumerate() {
            let dst = &mut out[((b * k + ki) * v + vi) * hw..][..hw];
            dst.iter_mut().zip(img).for_each(|(d, x)| *d = T::lit(x));
        }
    }
    out
}

/// Gradients of [`forward`] with respect to values and kernel.
pub(crate) fn backward<T: Scalar>(
    plan: &Plan,
    values: &[T],
    kernel: &[T],
    grad: &[T],
    (n, u, v, k): (usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>) {
    let (h, w, hw, r) = (plan.h, plan.w, plan.h * plan.w, plan.r);
    let c = ((r - 1) / 2) as isize;
    let ek = plan.kernel_spectra(kernel, k, u);

    // per sample: value gradients and the kernel-gradient cross spectrum
    let parts: Vec<(Vec<Vec<f64>>, Vec<Vec<C64>>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut gv = Vec::with_capacity(v * u);
            let mut cross = vec![vec![C64::default(); plan.len()]; k * u];
            for vi in 0..v {
                let vs: Vec<Vec<C64>> = (0..u)
                    .map(|ui| plan.forward(&values[((b * u + ui) * v + vi) * hw..][..hw], h, w))
                    .collect();
                let gs: Vec<Vec<C64>> = (0..k)
                    .map(|ki| plan.forward(&grad[((b * k + ki) * v + vi) * hw..][..hw], h, w))
                    .collect();
                for ui in 0..u {
                    let mut acc = vec![C64::default(); plan.len()];
                    for ki in 0..k {
                        for ((a, e), g) in acc.iter_mut().zip(&ek[ki * u + ui]).zip(&gs[ki]) {
                            *a += e * g;
                        }
                        let cr = &mut cross[ki * u + ui];
                        for ((a, g), x) in cr.iter_mut().zip(&gs[ki]).zip(&vs[ui]) {
                            *a += g.conj() * x;
                        }
                    }
                    gv.push(plan.inverse(acc, c, c, h, w));
                }
            }
            (gv, cross)
        })
        .collect();

    let mut gvalues = vec![T::zero(); values.len()];
    let mut cross_total = vec![vec![C64::default(); plan.len()]; k * u];
    for (b, (gv, cross)) in parts.into_iter().enumerate() {
        for (i, img) in gv.into_iter().enumerate() {
            let (vi, ui) = (i / u, i % u);
            let dst = &mut gvalues[((b * u + ui) * v + vi) * hw..][..hw];
            dst.iter_mut().zip(img).for_each(|(d, x)| *d = T::lit(x));
        }
        for (tot, part) in cross_total.iter_mut().zip(cross) {
            tot.iter_mut().zip(part).for_each(|(t, p)| *t += p);
        }
    }
    let gkernel = cross_total
        .into_par_iter()
        .map(|spec| plan.inverse(spec, -c, -c, r, r))
        .collect::<Vec<_>>()
        .concat()
        .into_iter()
        .map(T::lit)
        .collect();
    (gvalues, gkernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn good_sizes() {
        assert_eq!(good_size(44), 45);
        assert_eq!(good_size(7), 8);
        assert_eq!(good_size(49), 50);
        assert_eq!(good_size(64), 64);
    }

    #[test]
    fn round_trip_is_identity() {
        let plan = Plan::new(5, 6, 3);
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let spec = plan.forward(&x, 5, 6);
        let back = plan.inverse(spec, 0, 0, 5, 6);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

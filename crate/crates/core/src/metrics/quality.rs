use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::Image;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape<T: Scalar>(op: &'static str, a: &Image<T>, b: &Image<T>) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return shape_err(
            op,
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        );
    }
    Ok(())
}

fn to_f64<T: Scalar>(img: &Image<T>) -> Vec<f64> {
    img.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Peak signal-to-noise ratio in dB for a peak value of 1.
///
/// Identical images give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let (x, y) = (to_f64(a), to_f64(b));
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mirror an out-of-range index back into `0..n`, repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
fn blur(src: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..WINDOW)
                .map(|t| k[t] * src[y * w + reflect(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..WINDOW)
                .map(|t| k[t] * tmp[reflect(y as isize + t as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5).
///
/// Stabilizers are `C1 = (0.01)^2`, `C2 = (0.03)^2` for a dynamic range of 1.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h.min(w) < WINDOW {
        return shape_err("ssim", format!("{h}x{w} image is smaller than the {WINDOW}x{WINDOW} window"));
    }
    let (x, y) = (to_f64(a), to_f64(b));
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = blur(&x, h, w, &k);
    let mu_y = blur(&y, h, w, &k);
    let xx = blur(&prod(&x, &x), h, w, &k);
    let yy = blur(&prod(&y, &y), h, w, &k);
    let xy = blur(&prod(&x, &y), h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let total: f64 = (0..h * w)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / (h * w) as f64)
}

/// Drop `px` pixels from every border.
pub fn shave<T: Scalar>(img: &Image<T>, px: usize) -> Result<Image<T>> {
    if px == 0 {
        return Ok(img.clone());
    }
    if 2 * px >= img.height() || 2 * px >= img.width() {
        return shape_err(
            "shave",
            format!("cannot shave {px} px from {}x{}", img.height(), img.width()),
        );
    }
    img.crop(px, px, img.height() - 2 * px, img.width() - 2 * px)
}

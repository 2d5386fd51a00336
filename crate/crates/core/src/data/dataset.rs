use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::metrics::{bicubic_resize, Image};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::load_image;

/// Tile size every training crop must be divisible by.
pub const CROP_MULTIPLE: usize = 8;

/// Crop `hr` so both sides divide by `s` and bicubic-downscale it by `s`.
pub fn make_pair<T: Scalar>(hr: &Image<T>, s: usize) -> Result<(Image<T>, Image<T>)> {
    if ![2, 3, 4].contains(&s) {
        return Err(Error::Config(format!("unsupported scale {s}")));
    }
    let (h, w) = (hr.height() / s * s, hr.width() / s * s);
    if h == 0 || w == 0 {
        return shape_err(
            "make_pair",
            format!("{}x{} image is smaller than scale {s}", hr.height(), hr.width()),
        );
    }
    let hr = hr.crop(0, 0, h, w)?;
    let lr = bicubic_resize(&hr, h / s, w / s)?;
    Ok((lr, hr))
}

/// Default high-resolution crop side: a 32-pixel low-resolution window.
pub fn default_crop(scale: usize) -> usize {
    32 * scale
}

/// Image files named by a manifest (one path per line, relative paths
/// resolved against the manifest's directory) or found directly in a
/// directory, in lexicographic order.
pub fn list_images(source: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let source = source.as_ref();
    let paths = if source.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(source)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        v.retain(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
        });
        v.sort();
        v
    } else {
        let base = source.parent().unwrap_or(Path::new("."));
        fs::read_to_string(source)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                let p = PathBuf::from(l);
                if p.is_absolute() { p } else { base.join(p) }
            })
            .collect()
    };
    if paths.is_empty() {
        return Err(Error::Usage(format!("no .pgm or .png images in {}", source.display())));
    }
    Ok(paths)
}

/// Training pairs with deterministic, counter-based crop sampling.
#[derive(Clone, Debug)]
pub struct Dataset {
    names: Vec<String>,
    hr: Vec<Image<f32>>,
    lr: Vec<Image<f32>>,
    scale: usize,
    /// High-resolution crop side; equal to the full image size when training
    /// on whole images.
    crop: (usize, usize),
    seed: u64,
}

impl Dataset {
    /// Load every image named by `source` (directory or manifest).
    ///
    /// `crop` is the high-resolution crop side: `None` picks
    /// [`default_crop`], `Some(0)` trains on whole images (which must then
    /// share one size).
    pub fn open(source: impl AsRef<Path>, scale: usize, crop: Option<usize>, seed: u64) -> Result<Self> {
        let images = list_images(source)?
            .into_iter()
            .map(|p| Ok((p.display().to_string(), load_image(&p)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(images, scale, crop, seed)
    }

    pub fn from_images(
        images: Vec<(String, Image<f32>)>,
        scale: usize,
        crop: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Usage("dataset is empty".into()));
        }
        let mut names = Vec::new();
        let mut hr = Vec::new();
        let mut lr = Vec::new();
        for (name, img) in images {
            let (l, h) = make_pair(&img, scale)?;
            names.push(name);
            hr.push(h);
            lr.push(l);
        }
        let min_h = hr.iter().map(Image::height).min().unwrap_or(0);
        let min_w = hr.iter().map(Image::width).min().unwrap_or(0);
        let crop = match crop.unwrap_or_else(|| default_crop(scale)) {
            0 => {
                if hr.iter().any(|i| i.height() != min_h || i.width() != min_w) {
                    return Err(Error::Config(
                        "whole-image training needs images of one size; set a crop".into(),
                    ));
                }
                (min_h, min_w)
            }
            c => {
                if c % CROP_MULTIPLE != 0 || c % scale != 0 {
                    return Err(Error::Config(format!(
                        "crop {c} must be a multiple of {CROP_MULTIPLE} and of scale {scale}"
                    )));
                }
                if c > min_h || c > min_w {
                    return Err(Error::Config(format!(
                        "crop {c} exceeds the smallest image ({min_h}x{min_w} after cropping to the scale)"
                    )));
                }
                (c, c)
            }
        };
        Ok(Self { names, hr, lr, scale, crop, seed })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// High-resolution crop `(height, width)`.
    pub fn crop(&self) -> (usize, usize) {
        self.crop
    }

    /// `(image index, low-resolution top, low-resolution left)` of each
    /// batch entry, a pure function of `(seed, step)`.
    pub fn crop_origins(&self, batch: usize, step: u64) -> Vec<(usize, usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let (lh, lw) = (self.crop.0 / self.scale, self.crop.1 / self.scale);
        (0..batch)
            .map(|_| {
                let i = rng.gen_range(0..self.len() as u64) as usize;
                let top = rng.gen_range(0..=(self.lr[i].height() - lh) as u64) as usize;
                let left = rng.gen_range(0..=(self.lr[i].width() - lw) as u64) as usize;
                (i, top, left)
            })
            .collect()
    }

    /// Low-resolution `[batch, 1, h, w]` and aligned high-resolution
    /// `[batch, 1, s*h, s*w]` crops.
    pub fn sample_batch<T: Scalar>(&self, batch: usize, step: u64) -> Result<(Tensor<T>, Tensor<T>)> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let s = self.scale;
        let (lh, lw) = (self.crop.0 / s, self.crop.1 / s);
        let mut lr = Vec::with_capacity(batch * lh * lw);
        let mut hr = Vec::with_capacity(batch * self.crop.0 * self.crop.1);
        for (i, top, left) in self.crop_origins(batch, step) {
            lr.extend(self.lr[i].crop(top, left, lh, lw)?.cast::<T>().into_data());
            hr.extend(
                self.hr[i].crop(top * s, left * s, self.crop.0, self.crop.1)?.cast::<T>().into_data(),
            );
        }
        Ok((
            Tensor::new(vec![batch, 1, lh, lw], lr)?,
            Tensor::new(vec![batch, 1, self.crop.0, self.crop.1], hr)?,
        ))
    }
}

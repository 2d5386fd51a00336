//! Grayscale image files, LR/HR pair synthesis and training-batch sampling.

mod dataset;
mod image_io;

pub use dataset::{default_crop, list_images, make_pair, Dataset, CROP_MULTIPLE};
pub use image_io::{load_image, save_image, BitDepth};

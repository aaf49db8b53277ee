//! Resize, centre crop and per-channel normalization.

use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resize_bilinear, resize_nearest};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub resize_to: usize,
    pub center_crop_to: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            resize_to: 448,
            center_crop_to: 392,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl PreprocessSpec {
    /// Resize straight to `size` with no cropping.
    pub fn square(size: usize) -> Self {
        Self {
            resize_to: size,
            center_crop_to: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.center_crop_to == 0 || self.center_crop_to > self.resize_to {
            return Err(Error::config(format!(
                "center crop {} must be positive and at most the resize {}",
                self.center_crop_to, self.resize_to
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("normalization std must be positive"));
        }
        Ok(())
    }

    fn crop_offset(&self) -> usize {
        (self.resize_to - self.center_crop_to) / 2
    }
}

/// `(3, crop, crop)` tensor: bilinear resize to a square, centre crop, then
/// `(v / 255 - mean) / std` per channel.
pub fn preprocess(image: &RgbImage, spec: &PreprocessSpec) -> Result<Array3<f32>> {
    spec.validate()?;
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::input("image is empty"));
    }
    let (r, c, off) = (spec.resize_to, spec.center_crop_to, spec.crop_offset());
    let mut out = Array3::zeros((3, c, c));
    for ch in 0..3 {
        let plane = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            image.get_pixel(x as u32, y as u32)[ch] as f32 / 255.0
        });
        let resized = resize_bilinear(plane.view(), r, r);
        let (m, sd) = (spec.mean[ch], spec.std[ch]);
        out.slice_mut(s![ch, .., ..])
            .assign(&resized.slice(s![off..off + c, off..off + c]).mapv(|v| (v - m) / sd));
    }
    Ok(out)
}

/// The same geometric transform applied to a ground-truth mask (nearest
/// neighbour, so it stays binary).
pub fn preprocess_mask(mask: &Array2<bool>, spec: &PreprocessSpec) -> Array2<bool> {
    let (r, c, off) = (spec.resize_to, spec.center_crop_to, spec.crop_offset());
    resize_nearest(mask.view(), r, r)
        .slice(s![off..off + c, off..off + c])
        .to_owned()
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

pub fn load_and_preprocess(path: &Path, spec: &PreprocessSpec) -> Result<Array3<f32>> {
    preprocess(&load_rgb(path)?, spec)
}

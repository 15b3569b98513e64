//! PNG loading, bilinear resizing and per-channel normalization.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel mean/std normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalizer {
    pub const IMAGENET: Normalizer =
        Normalizer { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };

    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    /// Per-channel statistics of a set of `[H, W, 3]` images with values in `[0, 1]`.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0usize;
        for img in images {
            for px in img.data().chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Self::identity();
        }
        let mut mean = [0f32; 3];
        let mut std = [1f32; 3];
        for c in 0..3 {
            let m = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - m * m).max(0.0);
            mean[c] = m as f32;
            std[c] = var.sqrt().max(1e-3) as f32;
        }
        Self { mean, std }
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let mut out = img.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn invert(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let mut out = img.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = px[c] * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

/// `[H, W, 3]` tensor in `[0, 1]` from an 8-bit RGB image.
pub fn from_rgb(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new([h as usize, w as usize, 3], data).expect("rgb buffer size")
}

pub fn to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::ShapeMismatch(format!("expected [H, W, 3], got {s:?}")));
    }
    let raw = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(ImageBuffer::<Rgb<u8>, _>::from_raw(s[1] as u32, s[0] as u32, raw).expect("buffer size"))
}

pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    to_rgb(t)?.save(path).map_err(Error::from)
}

/// Loads a PNG as 8-bit RGB, resizing bilinearly to `height × width` when needed.
pub fn load_png(path: &Path, height: usize, width: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.dimensions() == (width as u32, height as u32) {
        img
    } else {
        image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
    };
    Ok(from_rgb(&img))
}

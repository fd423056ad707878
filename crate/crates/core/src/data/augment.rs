//! Training-time augmentation: random resized crop and horizontal flip.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Crop area as a fraction of the image, drawn uniformly.
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            scale_min: 0.8,
            scale_max: 1.0,
            flip_prob: 0.5,
        }
    }
}

/// Square crop window in source pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// Bilinear resize of a crop of `[C, H, W]` to `[C, out, out]` using
/// half-pixel sample centres with edge clamping. A full-size crop at the
/// same output size reproduces the input exactly.
pub fn resized_crop(image: &Tensor, crop: Crop, out: usize) -> Tensor {
    let &[c, h, w] = image.shape() else {
        panic!("resized_crop expects [C, H, W], got {:?}", image.shape());
    };
    assert!(crop.top + crop.side <= h && crop.left + crop.side <= w && crop.side > 0);
    let ratio = crop.side as f64 / out as f64;
    let axis = |o: usize, offset: usize| {
        let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (crop.side - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(crop.side - 1);
        (offset + i0, offset + i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..out).map(|o| axis(o, crop.top)).collect();
    let xs: Vec<_> = (0..out).map(|o| axis(o, crop.left)).collect();
    let d = image.data();
    let mut data = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = if fx == 0.0 { plane[y0 * w + x0] } else { plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx };
                let v = if fy == 0.0 {
                    top
                } else {
                    let bot = if fx == 0.0 { plane[y1 * w + x0] } else { plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx };
                    top * (1.0 - fy) + bot * fy
                };
                data.push(v);
            }
        }
    }
    Tensor::new(&[c, out, out], data).expect("shape matches")
}

pub fn hflip(image: &Tensor) -> Tensor {
    let w = *image.shape().last().unwrap();
    let d = image.data();
    Tensor::from_fn(image.shape(), |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    })
}

/// Draws a crop window whose area fraction is uniform in the configured range.
pub fn sample_crop(size: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Crop {
    let area = rng.uniform_range(cfg.scale_min, cfg.scale_max);
    let side = ((area.sqrt() * size as f64).round() as usize).clamp(1, size);
    let top = rng.below((size - side + 1) as u64) as usize;
    let left = rng.below((size - side + 1) as u64) as usize;
    Crop { top, left, side }
}

/// Random resized crop back to the input size, then a random flip.
pub fn augment_train(image: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor {
    if !cfg.enabled {
        return image.clone();
    }
    let size = image.shape()[1];
    let crop = sample_crop(size, cfg, rng);
    let out = resized_crop(image, crop, size);
    if rng.bernoulli(cfg.flip_prob) {
        hflip(&out)
    } else {
        out
    }
}

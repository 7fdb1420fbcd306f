//! Train-time augmentation (reduced random-augment with three op families
//! plus random erasing) and bilinear resizing.

use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::bilinear_resize;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Ops drawn (with replacement) from {flip, rotate, intensity} per image.
    pub ops_per_image: usize,
    pub flip_prob: f64,
    pub rotate_max_deg: f64,
    /// Intensity scale in [1-j, 1+j], shift in [-j, j].
    pub intensity_jitter: f64,
    pub erase_prob: f64,
    /// Erased-rectangle area as a fraction of the image, (min, max).
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            ops_per_image: 2,
            flip_prob: 0.5,
            rotate_max_deg: 10.0,
            intensity_jitter: 0.1,
            erase_prob: 0.25,
            erase_area: (0.02, 0.2),
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn identity() -> Self {
        AugmentConfig {
            ops_per_image: 0,
            flip_prob: 0.0,
            rotate_max_deg: 0.0,
            intensity_jitter: 0.0,
            erase_prob: 0.0,
            erase_area: (0.02, 0.2),
        }
    }
}

fn flip_horizontal(img: &mut GrayImage) {
    for y in 0..img.height {
        img.pixels[y * img.width..(y + 1) * img.width].reverse();
    }
}

/// Rotate by `deg` around the image center, bilinear sampling, zero fill.
fn rotate(img: &GrayImage, deg: f64) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let rad = deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (wx, wy) = (sx - x0 as f64, sy - y0 as f64);
            let top = img.at(y0, x0) * (1.0 - wx) + img.at(y0, x1) * wx;
            let bot = img.at(y1, x0) * (1.0 - wx) + img.at(y1, x1) * wx;
            out.pixels[y * w + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Apply the configured augmentation pipeline. The caller owns the RNG
/// stream, so determinism is a seeding contract: derive it from
/// (global seed, epoch, record index).
pub fn augment(img: &GrayImage, cfg: &AugmentConfig, rng: &mut Rng) -> GrayImage {
    let mut out = img.clone();
    for _ in 0..cfg.ops_per_image {
        match rng.below(3) {
            0 => {
                if rng.bernoulli(cfg.flip_prob) {
                    flip_horizontal(&mut out);
                }
            }
            1 => {
                let deg = rng.range_f64(-cfg.rotate_max_deg, cfg.rotate_max_deg);
                out = rotate(&out, deg);
            }
            _ => {
                let scale = rng.range_f64(1.0 - cfg.intensity_jitter, 1.0 + cfg.intensity_jitter);
                let shift = rng.range_f64(-cfg.intensity_jitter, cfg.intensity_jitter);
                for v in &mut out.pixels {
                    *v = *v * scale + shift;
                }
            }
        }
    }
    if cfg.erase_prob > 0.0 && rng.bernoulli(cfg.erase_prob) {
        let (h, w) = (out.height, out.width);
        let area = rng.range_f64(cfg.erase_area.0, cfg.erase_area.1) * (h * w) as f64;
        let aspect = rng.range_f64(0.5f64.ln(), 2.0f64.ln()).exp();
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let ew = ((area / eh as f64).round() as usize).clamp(1, w);
        let y0 = rng.below(h - eh + 1);
        let x0 = rng.below(w - ew + 1);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                out.pixels[y * w + x] = rng.next_f64();
            }
        }
    }
    for v in &mut out.pixels {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Bilinear resize to target x target (half-pixel centers).
pub fn resize(img: &GrayImage, target: usize) -> Result<GrayImage> {
    if target == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    let pixels = bilinear_resize(&img.pixels, img.height, img.width, target, target);
    Ok(GrayImage { width: target, height: target, pixels })
}

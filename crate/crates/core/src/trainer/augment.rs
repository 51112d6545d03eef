use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coverage::CoverageGrid;
use crate::dataset::RgbImage;

/// Photometric and geometric jitter, each op gated by its own probability.
/// Only the flip changes the coverage target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub brightness_prob: f64,
    /// Maximum additive shift on the `[0, 1]` scale.
    pub brightness_delta: f64,
    pub contrast_prob: f64,
    /// Contrast factor drawn from `[1 - r, 1 + r]`.
    pub contrast_range: f64,
    pub color_prob: f64,
    /// Maximum hue rotation in degrees.
    pub hue_delta: f64,
    /// Saturation factor drawn from `[1 - r, 1 + r]`.
    pub saturation_range: f64,
    pub noise_prob: f64,
    /// Standard deviation on the `[0, 1]` scale.
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness_prob: 0.3,
            brightness_delta: 0.1,
            contrast_prob: 0.3,
            contrast_range: 0.2,
            color_prob: 0.3,
            hue_delta: 10.0,
            saturation_range: 0.2,
            noise_prob: 0.3,
            noise_std: 0.02,
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn map_pixels(img: &mut RgbImage, mut f: impl FnMut([f64; 3]) -> [f64; 3]) {
    for px in img.data.chunks_exact_mut(3) {
        let rgb = [
            px[0] as f64 / 255.0,
            px[1] as f64 / 255.0,
            px[2] as f64 / 255.0,
        ];
        let out = f(rgb);
        for (dst, v) in px.iter_mut().zip(out) {
            *dst = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
}

/// Returns an augmented copy of `image` and the matching coverage target.
pub fn augment_sample<R: Rng + ?Sized>(
    image: &RgbImage,
    coverage: &CoverageGrid,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (RgbImage, CoverageGrid) {
    let mut img = image.clone();
    let mut cov = coverage.clone();
    if rng.random_bool(cfg.flip_prob) {
        img = img.flipped_horizontally();
        cov = cov.flipped_horizontally();
    }
    if rng.random_bool(cfg.brightness_prob) {
        let delta = rng.random_range(-cfg.brightness_delta..=cfg.brightness_delta);
        map_pixels(&mut img, |p| p.map(|v| v + delta));
    }
    if rng.random_bool(cfg.contrast_prob) {
        let factor = rng.random_range(1.0 - cfg.contrast_range..=1.0 + cfg.contrast_range);
        let n = (img.data.len() as f64).max(1.0);
        let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / n / 255.0;
        map_pixels(&mut img, |p| p.map(|v| mean + (v - mean) * factor));
    }
    if rng.random_bool(cfg.color_prob) {
        let hue = rng.random_range(-cfg.hue_delta..=cfg.hue_delta);
        let sat = rng.random_range(1.0 - cfg.saturation_range..=1.0 + cfg.saturation_range);
        map_pixels(&mut img, |p| {
            let [h, s, v] = rgb_to_hsv(p);
            hsv_to_rgb([h + hue, (s * sat).clamp(0.0, 1.0), v])
        });
    }
    if rng.random_bool(cfg.noise_prob) && cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("positive std");
        map_pixels(&mut img, |p| p.map(|v| v + normal.sample(rng)));
    }
    (img, cov)
}

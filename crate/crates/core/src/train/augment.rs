//! Photometric and geometric augmentations, deterministic per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub brightness: f64,
    pub blur: f64,
    pub crop: f64,
    pub color: f64,
    pub erase: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            brightness: 0.5,
            blur: 0.3,
            crop: 0.5,
            color: 0.3,
            erase: 0.3,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            blur: 0.0,
            crop: 0.0,
            color: 0.0,
            erase: 0.0,
        }
    }
}

/// Brightness offset in `[-b, b]` and contrast gain in `[1-c, 1+c]`
/// around the image mean.
pub fn brightness_contrast(img: &mut Image, offset: f32, gain: f32) {
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.data().len() as f64;
    let mean = mean as f32;
    for v in img.data_mut() {
        *v = (*v - mean) * gain + mean + offset;
    }
}

/// 3×3 Gaussian blur per channel with clamped borders.
pub fn gaussian_blur3(img: &Image, sigma: f32) -> Image {
    let k1 = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * k1;
    let k = [k1 / norm, 1.0 / norm, k1 / norm];
    let (c, h, w) = img.dims();
    let mut tmp = img.clone();
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let s: f32 = (0..3)
                    .map(|i| k[i] * img.get(ch, y, (x + i).saturating_sub(1).min(w - 1)))
                    .sum();
                tmp.set(ch, y, x, s);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let s: f32 = (0..3)
                    .map(|i| k[i] * tmp.get(ch, (y + i).saturating_sub(1).min(h - 1), x))
                    .sum();
                out.set(ch, y, x, s);
            }
        }
    }
    out
}

fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize, area: (f32, f32), ratio: (f32, f32)) -> (f32, f32, f32, f32) {
    let a = rng.random_range(area.0..=area.1) * (h * w) as f32;
    let r = (rng.random_range(ratio.0.ln()..=ratio.1.ln())).exp();
    let bh = (a / r).sqrt().clamp(1.0, h as f32);
    let bw = (a * r).sqrt().clamp(1.0, w as f32);
    let y0 = rng.random_range(0.0..=(h as f32 - bh));
    let x0 = rng.random_range(0.0..=(w as f32 - bw));
    (y0, x0, bh, bw)
}

/// Applies each enabled transform with its probability, then clamps to
/// `[0, 1]`.
pub fn augment(img: &Image, seed: u64, policy: &AugmentPolicy) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    let (_, h, w) = img.dims();
    if rng.random_bool(policy.brightness) {
        let offset = rng.random_range(-0.2..=0.2);
        let gain = rng.random_range(0.7..=1.3);
        brightness_contrast(&mut out, offset, gain);
    }
    if rng.random_bool(policy.blur) {
        out = gaussian_blur3(&out, rng.random_range(0.3..=1.5));
    }
    if rng.random_bool(policy.crop) {
        let (y0, x0, bh, bw) = random_box(&mut rng, h, w, (0.7, 1.0), (0.75, 4.0 / 3.0));
        out = out.resample(y0, x0, bh, bw, h, w);
    }
    if rng.random_bool(policy.color) {
        for c in 0..out.channels() {
            let g: f32 = rng.random_range(0.8..=1.2);
            out.plane_mut(c).iter_mut().for_each(|v| *v *= g);
        }
    }
    if rng.random_bool(policy.erase) {
        let (y0, x0, bh, bw) = random_box(&mut rng, h, w, (0.02, 0.2), (0.3, 3.3));
        let (y0, x0) = (y0 as usize, x0 as usize);
        let (y1, x1) = ((y0 + bh as usize).min(h), (x0 + bw as usize).min(w));
        for c in 0..out.channels() {
            for y in y0..y1 {
                for x in x0..x1 {
                    out.set(c, y, x, 0.0);
                }
            }
        }
    }
    out.clamp01();
    out
}

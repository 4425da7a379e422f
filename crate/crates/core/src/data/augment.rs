//! Random horizontal flip plus brightness and per-channel colour jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Factor applied to all channels, drawn uniformly from this range.
    pub brightness: (f64, f64),
    /// Independent factor per channel.
    pub color: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            brightness: (0.8, 1.2),
            color: (0.9, 1.1),
        }
    }
}

/// One concrete draw of the augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub brightness: f64,
    pub color: [f64; 3],
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: false,
            brightness: 1.0,
            color: [1.0; 3],
        }
    }

    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
        let brightness = rng.gen_range(cfg.brightness.0..=cfg.brightness.1);
        let mut color = [1.0; 3];
        for c in &mut color {
            *c = rng.gen_range(cfg.color.0..=cfg.color.1);
        }
        AugmentParams {
            flip,
            brightness,
            color,
        }
    }
}

fn transform_image(t: &Tensor, p: &AugmentParams) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let gain = p.brightness * p.color[ch % 3];
        for y in 0..h {
            for x in 0..w {
                let sx = if p.flip { w - 1 - x } else { x };
                out[ch * h * w + y * w + x] = (src[ch * h * w + y * w + sx] * gain).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(out, s).expect("same shape as input")
}

/// Applies a fixed augmentation consistently to image, clean target and polygons.
pub fn apply_augment(sample: &AnnotatedImage, p: &AugmentParams) -> AnnotatedImage {
    let width = sample.width() as f64;
    AnnotatedImage {
        image: transform_image(&sample.image, p),
        clean: sample.clean.as_ref().map(|c| transform_image(c, p)),
        polygons: sample
            .polygons
            .iter()
            .map(|poly| if p.flip { poly.flipped_x(width) } else { poly.clone() })
            .collect(),
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &AnnotatedImage, cfg: &AugmentConfig, rng: &mut R) -> AnnotatedImage {
    apply_augment(sample, &AugmentParams::draw(cfg, rng))
}

//! Geometric and colour augmentation.
//!
//! Geometry is applied to the RGB image and, for live samples, to the depth
//! target with the very same pixel mapping. Colour jitter touches RGB only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::bilinear_zero;
use super::{Label, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Maximum shift as a fraction of the image side.
    pub max_translate: f64,
    /// Maximum relative zoom, e.g. 0.1 for a factor in [0.9, 1.1].
    pub max_scale: f64,
    pub max_rotate_deg: f64,
    pub flip_prob: f64,
    /// Maximum additive brightness shift.
    pub max_brightness: f64,
    /// Maximum relative saturation change.
    pub max_saturation: f64,
    /// Maximum additive per-channel tint ("temperature").
    pub max_tint: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_translate: 0.1,
            max_scale: 0.1,
            max_rotate_deg: 10.0,
            flip_prob: 0.5,
            max_brightness: 0.1,
            max_saturation: 0.1,
            max_tint: 0.05,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            max_translate: 0.0,
            max_scale: 0.0,
            max_rotate_deg: 0.0,
            flip_prob: 0.0,
            max_brightness: 0.0,
            max_saturation: 0.0,
            max_tint: 0.0,
            seed: 0,
        }
    }

    fn magnitudes(&self) -> [f64; 7] {
        [
            self.max_translate,
            self.max_scale,
            self.max_rotate_deg,
            self.flip_prob,
            self.max_brightness,
            self.max_saturation,
            self.max_tint,
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.magnitudes().iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err("augmentation magnitudes must be finite and non-negative".into());
        }
        if self.flip_prob > 1.0 {
            return Err(format!("flip probability {} exceeds 1", self.flip_prob));
        }
        if self.max_scale >= 1.0 {
            return Err(format!("scale delta {} must be below 1", self.max_scale));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.magnitudes().iter().all(|&m| m == 0.0)
    }
}

/// Flip, then zoom and rotate about the image centre, then shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    /// Shift in pixels.
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
    pub angle_deg: f64,
    pub flip: bool,
}

impl Default for GeometricTransform {
    fn default() -> Self {
        Self {
            tx: 0.0,
            ty: 0.0,
            scale: 1.0,
            angle_deg: 0.0,
            flip: false,
        }
    }
}

impl GeometricTransform {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Resamples every channel of a `C×H×W` image by inverse mapping.
    pub fn apply(&self, img: &Tensor) -> Tensor {
        if self.is_identity() {
            return img.clone();
        }
        let s = img.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let mut out = Vec::with_capacity(img.numel());
        for ch in 0..c {
            let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let u = x as f64 - cx - self.tx;
                    let v = y as f64 - cy - self.ty;
                    // inverse rotation, then inverse zoom
                    let mut su = (cos * u + sin * v) / self.scale;
                    let sv = (-sin * u + cos * v) / self.scale;
                    if self.flip {
                        su = -su;
                    }
                    out.push(bilinear_zero(plane, h, w, cx + su, cy + sv));
                }
            }
        }
        Tensor::new(s, out).expect("same shape")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub saturation: f64,
    pub tint: [f64; 3],
}

impl ColorJitter {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Jitters a `3×H×W` image and clamps it to `[0, 1]`.
    pub fn apply(&self, rgb: &Tensor) -> Tensor {
        if self.is_identity() {
            return rgb.clone();
        }
        let hw = rgb.shape()[1] * rgb.shape()[2];
        let mut out = rgb.clone();
        let d = out.data_mut();
        for i in 0..hw {
            let gray = (d[i] + d[hw + i] + d[2 * hw + i]) / 3.0;
            for c in 0..3 {
                let v = &mut d[c * hw + i];
                *v = gray + (*v - gray) * (1.0 + self.saturation) + self.brightness + self.tint[c];
                *v = v.clamp(0.0, 1.0);
            }
        }
        out
    }
}

fn symmetric<R: Rng>(rng: &mut R, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.gen_range(-max..=max)
    }
}

/// Draws one geometric transform and one colour jitter for an image of
/// side `size`.
pub fn sample_transform<R: Rng>(config: &AugmentConfig, size: usize, rng: &mut R) -> (GeometricTransform, ColorJitter) {
    let s = size as f64;
    let geo = GeometricTransform {
        tx: symmetric(rng, config.max_translate) * s,
        ty: symmetric(rng, config.max_translate) * s,
        scale: 1.0 + symmetric(rng, config.max_scale),
        angle_deg: symmetric(rng, config.max_rotate_deg),
        flip: config.flip_prob > 0.0 && rng.gen_bool(config.flip_prob),
    };
    let color = ColorJitter {
        brightness: symmetric(rng, config.max_brightness),
        saturation: symmetric(rng, config.max_saturation),
        tint: [
            symmetric(rng, config.max_tint),
            symmetric(rng, config.max_tint),
            symmetric(rng, config.max_tint),
        ],
    };
    (geo, color)
}

/// Applies an explicit transform pair to a sample.
pub fn augment_with(sample: &Sample, geo: &GeometricTransform, color: &ColorJitter) -> Sample {
    let rgb = color.apply(&geo.apply(&sample.rgb));
    let depth_target = match sample.label {
        Label::Live => geo.apply(&sample.depth_target),
        // a flat attack has no depth to move around
        Label::Spoof => sample.depth_target.clone(),
    };
    Sample {
        rgb,
        depth_target,
        label: sample.label,
        spoof_class: sample.spoof_class,
    }
}

pub fn augment<R: Rng>(sample: &Sample, config: &AugmentConfig, rng: &mut R) -> Sample {
    if config.is_disabled() {
        return sample.clone();
    }
    let (geo, color) = sample_transform(config, sample.size(), rng);
    augment_with(sample, &geo, &color)
}

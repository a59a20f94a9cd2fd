//! Procedural face samples standing in for a depth-labelled anti-spoofing
//! dataset.
//!
//! A live sample is an ellipsoidal head height field (zero background,
//! single peak at the nose) together with a Lambertian RGB rendering of it.
//! A spoof sample is a live rendering re-captured through a flat medium:
//! its shading is partially flattened, a class-specific artifact is added,
//! and its depth target is all zeros.

mod augment;
mod dataset;
mod image;

pub use augment::{augment, augment_with, sample_transform, AugmentConfig, ColorJitter, GeometricTransform};
pub use dataset::{make_dataset, Batch, ClassCounts, Dataset, DatasetFiles, DatasetManifest, DatasetSpec};
pub use image::resize_normalize;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("image size {0} is below the minimum of 16")]
    SizeTooSmall(usize),
    #[error("label {label:?} is inconsistent with spoof class {class:?}")]
    Inconsistent { label: Label, class: SpoofClass },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Presentation label; the numeric value is the one written to label files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Live = 0,
    Spoof = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Live),
            1 => Some(Label::Spoof),
            _ => None,
        }
    }

    /// Liveness target for binary cross-entropy: 1 for live, 0 for spoof.
    pub fn liveness(self) -> f64 {
        match self {
            Label::Live => 1.0,
            Label::Spoof => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpoofClass {
    None,
    Print,
    Screen,
    Mask,
}

impl SpoofClass {
    pub const ALL: [SpoofClass; 4] = [SpoofClass::None, SpoofClass::Print, SpoofClass::Screen, SpoofClass::Mask];

    pub fn label(self) -> Label {
        match self {
            SpoofClass::None => Label::Live,
            _ => Label::Spoof,
        }
    }

    /// Index into the multihead class distribution (live, print, screen, mask).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpoofClass::None => "none",
            SpoofClass::Print => "print",
            SpoofClass::Screen => "screen",
            SpoofClass::Mask => "mask",
        }
    }
}

impl fmt::Display for SpoofClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpoofClass {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SpoofClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| SynthError::Dataset(format!("unknown spoof class {s:?}")))
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×S×S` in `[0, 1]`.
    pub rgb: Tensor,
    /// `1×S×S` in `[0, 1]`; exactly zero for spoofs.
    pub depth_target: Tensor,
    pub label: Label,
    pub spoof_class: SpoofClass,
}

impl Sample {
    pub fn new(rgb: Tensor, depth_target: Tensor, label: Label, spoof_class: SpoofClass) -> Result<Self, SynthError> {
        if spoof_class.label() != label {
            return Err(SynthError::Inconsistent {
                label,
                class: spoof_class,
            });
        }
        Ok(Self {
            rgb,
            depth_target,
            label,
            spoof_class,
        })
    }

    pub fn size(&self) -> usize {
        self.rgb.shape()[1]
    }
}

/// Renders one sample. The output is fully determined by the RNG state.
pub fn generate_sample<R: Rng>(rng: &mut R, label: Label, class: SpoofClass, size: usize) -> Result<Sample, SynthError> {
    if size < 16 {
        return Err(SynthError::SizeTooSmall(size));
    }
    if class.label() != label {
        return Err(SynthError::Inconsistent { label, class });
    }
    let face = FaceParams::draw(rng, size);
    let depth = face.depth_field();
    let flatten = match class {
        SpoofClass::None => 0.0,
        _ => rng.gen_range(0.8..1.0),
    };
    let mut rgb = face.render(rng, &depth, flatten);
    match class {
        SpoofClass::None => {}
        SpoofClass::Print => print_artifacts(rng, &mut rgb, size),
        SpoofClass::Screen => screen_artifacts(rng, &mut rgb, size),
        SpoofClass::Mask => mask_artifacts(rng, &mut rgb, size, &face),
    }
    rgb.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let depth = match label {
        Label::Live => depth,
        Label::Spoof => vec![0.0; size * size],
    };
    Sample::new(
        Tensor::new(&[3, size, size], rgb)?,
        Tensor::new(&[1, size, size], depth)?,
        label,
        class,
    )
}

struct FaceParams {
    size: usize,
    cx: f64,
    cy: f64,
    /// horizontal / vertical semi-axes in pixels
    ax: f64,
    ay: f64,
    nose: (f64, f64),
    nose_sigma: f64,
    nose_amp: f64,
    eyes: [(f64, f64); 2],
    eye_r: f64,
    mouth: (f64, f64),
    skin: [f64; 3],
    light: [f64; 3],
    background: [f64; 3],
    bg_gradient: [f64; 2],
}

impl FaceParams {
    fn draw<R: Rng>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let cx = (s - 1.0) / 2.0 + rng.gen_range(-0.08..0.08) * s;
        let cy = (s - 1.0) / 2.0 + rng.gen_range(-0.06..0.06) * s;
        let ax = rng.gen_range(0.26..0.33) * s;
        let ay = (ax * rng.gen_range(1.15..1.35)).min(0.44 * s);
        let nose = (
            cx + rng.gen_range(-0.08..0.08) * ax,
            cy + rng.gen_range(0.0..0.15) * ay,
        );
        let eye_dx = rng.gen_range(0.35..0.45) * ax;
        let eye_y = cy - rng.gen_range(0.2..0.3) * ay;
        let r = rng.gen_range(0.55..0.95);
        let skin = [r, r * rng.gen_range(0.62..0.82), r * rng.gen_range(0.48..0.7)];
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let tilt: f64 = rng.gen_range(0.25..0.7);
        let light = [tilt * theta.cos(), tilt * theta.sin(), (1.0 - tilt * tilt).sqrt()];
        let background = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        Self {
            size,
            cx,
            cy,
            ax,
            ay,
            nose,
            nose_sigma: rng.gen_range(0.14..0.22) * ax,
            nose_amp: rng.gen_range(0.2..0.35),
            eyes: [(cx - eye_dx, eye_y), (cx + eye_dx, eye_y)],
            eye_r: rng.gen_range(0.12..0.18) * ax,
            mouth: (cx, cy + rng.gen_range(0.45..0.55) * ay),
            skin,
            light,
            background,
            bg_gradient: [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)],
        }
    }

    fn inside(&self, x: f64, y: f64) -> Option<f64> {
        let u = (x - self.cx) / self.ax;
        let v = (y - self.cy) / self.ay;
        let r2 = u * u + v * v;
        (r2 < 1.0).then_some(r2)
    }

    /// Head height field normalized so its maximum is exactly 1.
    fn depth_field(&self) -> Vec<f64> {
        let n = self.size;
        let mut raw = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (xf, yf) = (x as f64, y as f64);
                let Some(r2) = self.inside(xf, yf) else {
                    continue;
                };
                let dome = (1.0 - r2).sqrt();
                let dn = ((xf - self.nose.0).powi(2) + (yf - self.nose.1).powi(2)) / (2.0 * self.nose_sigma.powi(2));
                let mut h = 0.75 * dome + self.nose_amp * (-dn).exp();
                for &(ex, ey) in &self.eyes {
                    let de = ((xf - ex).powi(2) + (yf - ey).powi(2)) / (2.0 * self.eye_r.powi(2));
                    h -= 0.08 * (-de).exp();
                }
                raw[y * n + x] = h.max(0.0);
            }
        }
        let max = raw.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            raw.iter_mut().for_each(|v| *v /= max);
        }
        raw
    }

    /// Lambertian shading of the height field; `flatten` in [0, 1) pulls
    /// the shading towards its mean, as a flat re-capture would.
    fn render<R: Rng>(&self, rng: &mut R, depth: &[f64], flatten: f64) -> Vec<f64> {
        let n = self.size;
        let relief = 0.35 * self.ax;
        let at = |x: isize, y: isize| -> f64 {
            let xc = x.clamp(0, n as isize - 1) as usize;
            let yc = y.clamp(0, n as isize - 1) as usize;
            depth[yc * n + xc]
        };
        let mut shade = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (xi, yi) = (x as isize, y as isize);
                let dzdx = (at(xi + 1, yi) - at(xi - 1, yi)) * 0.5 * relief;
                let dzdy = (at(xi, yi + 1) - at(xi, yi - 1)) * 0.5 * relief;
                let norm = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
                let ndotl = (-dzdx * self.light[0] - dzdy * self.light[1] + self.light[2]) / norm;
                shade[y * n + x] = 0.3 + 0.7 * ndotl.max(0.0);
            }
        }
        let face_pixels: Vec<usize> = (0..n * n).filter(|&i| depth[i] > 0.0).collect();
        if flatten > 0.0 && !face_pixels.is_empty() {
            let mean = face_pixels.iter().map(|&i| shade[i]).sum::<f64>() / face_pixels.len() as f64;
            for &i in &face_pixels {
                shade[i] = mean + (shade[i] - mean) * (1.0 - flatten);
            }
        }
        let mut rgb = vec![0.0; 3 * n * n];
        let s = n as f64;
        for y in 0..n {
            for x in 0..n {
                let (xf, yf) = (x as f64, y as f64);
                let i = y * n + x;
                let bg_shift = self.bg_gradient[0] * (xf / s - 0.5) + self.bg_gradient[1] * (yf / s - 0.5);
                let mut px = [
                    self.background[0] + bg_shift,
                    self.background[1] + bg_shift,
                    self.background[2] + bg_shift,
                ];
                if self.inside(xf, yf).is_some() {
                    for c in 0..3 {
                        px[c] = self.skin[c] * shade[i];
                    }
                    for &(ex, ey) in &self.eyes {
                        let d = ((xf - ex).powi(2) + (yf - ey).powi(2)).sqrt() / (0.6 * self.eye_r);
                        if d < 1.0 {
                            px.iter_mut().for_each(|v| *v *= 0.35 + 0.65 * d);
                        }
                    }
                    let mu = ((xf - self.mouth.0) / (0.35 * self.ax)).powi(2) + ((yf - self.mouth.1) / 1.2).powi(2);
                    if mu < 1.0 {
                        px[0] *= 0.85;
                        px[1] *= 0.5;
                        px[2] *= 0.5;
                    }
                }
                for c in 0..3 {
                    rgb[c * n * n + i] = px[c] + rng.gen_range(-0.02..0.02);
                }
            }
        }
        rgb
    }
}

fn print_artifacts<R: Rng>(rng: &mut R, rgb: &mut [f64], n: usize) {
    // paper border: everything outside an inset rectangle turns paper-white
    if rng.gen_bool(0.8) {
        let inset = rng.gen_range(1..=(n / 12).max(1));
        let white = rng.gen_range(0.85..0.98);
        for y in 0..n {
            for x in 0..n {
                if x < inset || y < inset || x >= n - inset || y >= n - inset {
                    for c in 0..3 {
                        rgb[c * n * n + y * n + x] = white + rng.gen_range(-0.02..0.02);
                    }
                }
            }
        }
    }
    // halftone: periodic 2×2 dot screen darkening the ink
    let period = rng.gen_range(3..=4);
    let amp = rng.gen_range(0.4..0.6);
    let (ox, oy) = (rng.gen_range(0..period), rng.gen_range(0..period));
    for y in 0..n {
        for x in 0..n {
            if (x + ox) % period < 2 && (y + oy) % period < 2 {
                for c in 0..3 {
                    rgb[c * n * n + y * n + x] *= 1.0 - amp;
                }
            }
        }
    }
}

fn screen_artifacts<R: Rng>(rng: &mut R, rgb: &mut [f64], n: usize) {
    let period = rng.gen_range(3.0..6.0);
    let amp = rng.gen_range(0.2..0.35);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let tint = rng.gen_range(0.1..0.2);
    for y in 0..n {
        let stripe = 1.0 + amp * (std::f64::consts::TAU * y as f64 / period + phase).sin();
        for x in 0..n {
            let i = y * n + x;
            rgb[i] = rgb[i] * stripe - 0.5 * tint;
            rgb[n * n + i] *= stripe;
            rgb[2 * n * n + i] = rgb[2 * n * n + i] * stripe + tint;
        }
    }
}

fn mask_artifacts<R: Rng>(rng: &mut R, rgb: &mut [f64], n: usize, face: &FaceParams) {
    let levels = rng.gen_range(2..=3) as f64;
    for v in rgb.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * (levels - 1.0)).round() / (levels - 1.0);
    }
    // rigid specular highlight somewhere on the face
    let hx = face.cx + rng.gen_range(-0.5..0.5) * face.ax;
    let hy = face.cy + rng.gen_range(-0.5..0.3) * face.ay;
    let sigma = rng.gen_range(0.12..0.25) * face.ax;
    let amp = rng.gen_range(0.45..0.7);
    for y in 0..n {
        for x in 0..n {
            let d = ((x as f64 - hx).powi(2) + (y as f64 - hy).powi(2)) / (2.0 * sigma * sigma);
            let add = amp * (-d).exp();
            for c in 0..3 {
                rgb[c * n * n + y * n + x] += add;
            }
        }
    }
}

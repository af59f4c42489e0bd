//! Random affine augmentation: rotation and scale about the image center,
//! then a translation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{bilinear_sample, Tensor4};

use super::synth::{SynthSample, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentRanges {
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    /// Translation drawn from `[-shift_frac, shift_frac]` times the image
    /// extent, per axis.
    pub shift_frac: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 30.0,
            scale: (0.75, 1.25),
            shift_frac: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineDraw {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Translation in pixels.
    pub shift: (f64, f64),
}

impl AffineDraw {
    pub const IDENTITY: Self = Self {
        rotation_deg: 0.0,
        scale: 1.0,
        shift: (0.0, 0.0),
    };

    pub fn sample<R: Rng>(ranges: &AugmentRanges, width: usize, height: usize, rng: &mut R) -> Self {
        let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let rotation_deg = sym(rng, ranges.rotation_deg);
        let scale = if ranges.scale.1 > ranges.scale.0 {
            rng.gen_range(ranges.scale.0..=ranges.scale.1)
        } else {
            ranges.scale.0
        };
        let sx = sym(rng, ranges.shift_frac) * width as f64;
        let sy = sym(rng, ranges.shift_frac) * height as f64;
        Self {
            rotation_deg,
            scale,
            shift: (sx, sy),
        }
    }
}

/// `p -> R s (p - c) + c + t` for image center `c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    m: [[f64; 2]; 2],
    center: (f64, f64),
    shift: (f64, f64),
}

impl Affine {
    pub fn new(draw: &AffineDraw, width: usize, height: usize) -> Self {
        let (s, c) = draw.rotation_deg.to_radians().sin_cos();
        let k = draw.scale;
        Self {
            m: [[k * c, -k * s], [k * s, k * c]],
            center: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            shift: draw.shift,
        }
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (px, py) = (x - self.center.0, y - self.center.1);
        (
            self.m[0][0] * px + self.m[0][1] * py + self.center.0 + self.shift.0,
            self.m[1][0] * px + self.m[1][1] * py + self.center.1 + self.shift.1,
        )
    }

    pub fn invert(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let (px, py) = (x - self.center.0 - self.shift.0, y - self.center.1 - self.shift.1);
        (
            (d * px - b * py) / det + self.center.0,
            (-c * px + a * py) / det + self.center.1,
        )
    }
}

/// Warps the image by inverse bilinear resampling and moves the keypoints
/// by the same transform; the heatmap target is rebuilt.
pub fn augment_with(sample: &SynthSample, draw: &AffineDraw, spec: &SynthSpec) -> Result<SynthSample> {
    let s = sample.image.shape();
    let a = Affine::new(draw, s.width, s.height);
    let mut image = Tensor4::zeros(s);
    for c in 0..s.channels {
        let src = sample.image.plane(0, c);
        let dst = image.plane_mut(0, c);
        for y in 0..s.height {
            for x in 0..s.width {
                let (sx, sy) = a.invert((x as f64, y as f64));
                dst[y * s.width + x] = bilinear_sample(src, s.height, s.width, sx as f32, sy as f32);
            }
        }
    }
    let keypoints: Vec<_> = sample.keypoints.iter().map(|&p| a.apply(p)).collect();
    Ok(SynthSample {
        image,
        target: spec.target_for(&keypoints)?,
        distractors: sample.distractors.iter().map(|&p| a.apply(p)).collect(),
        keypoints,
    })
}

pub fn augment_sample<R: Rng>(sample: &SynthSample, ranges: &AugmentRanges, spec: &SynthSpec, rng: &mut R) -> Result<SynthSample> {
    let s = sample.image.shape();
    let draw = AffineDraw::sample(ranges, s.width, s.height, rng);
    augment_with(sample, &draw, spec)
}

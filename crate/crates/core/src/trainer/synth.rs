//! Synthetic cue/target data with a long-range dependency.
//!
//! Channel 0 holds the target blob and `distractors` identical blobs,
//! channel 1 holds a wider cue blob placed `displacement` pixels before
//! the target, channel 2 holds only noise. The ground truth marks the
//! target alone, so a detector has to relate channel 0 to channel 1 at
//! that distance to tell the target from the distractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

use super::heatmap::heatmap_target;

pub const SYNTH_CHANNELS: usize = 3;
const MAX_PLACEMENT_TRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Target position minus cue position, `(dx, dy)` in pixels.
    pub displacement: (f64, f64),
    pub blob_sigma: f64,
    pub cue_sigma: f64,
    pub distractors: usize,
    pub noise_std: f64,
    pub count: usize,
    pub seed: u64,
    /// Heatmap cells per image pixel is `1 / heatmap_stride`.
    pub heatmap_stride: usize,
    pub heatmap_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            displacement: (10.0, 0.0),
            blob_sigma: 1.0,
            cue_sigma: 4.0,
            distractors: 2,
            noise_std: 0.05,
            count: 256,
            seed: 0,
            heatmap_stride: 1,
            heatmap_sigma: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[1, 3, H, W]`
    pub image: Tensor4<f32>,
    /// Keypoints in image pixels, `(x, y)`.
    pub keypoints: Vec<(f64, f64)>,
    /// `[1, M, H / stride, W / stride]`
    pub target: Tensor4<f32>,
    /// Distractor centers, for diagnostics.
    pub distractors: Vec<(f64, f64)>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (dx, dy) = self.displacement;
        if self.height == 0 || self.width == 0 || self.count == 0 || self.heatmap_stride == 0 {
            return Err(Error::Config("synthetic sizes and count must be positive".into()));
        }
        if dx.abs() >= self.width as f64 || dy.abs() >= self.height as f64 {
            return Err(Error::Config(format!(
                "displacement ({dx}, {dy}) does not fit a {}x{} image",
                self.height, self.width
            )));
        }
        if !(self.blob_sigma > 0.0 && self.cue_sigma > 0.0 && self.heatmap_sigma > 0.0) {
            return Err(Error::Config("blob, cue and heatmap sigmas must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if self.height % self.heatmap_stride != 0 || self.width % self.heatmap_stride != 0 {
            return Err(Error::Config("heatmap_stride must divide the image size".into()));
        }
        Ok(())
    }

    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.height / self.heatmap_stride, self.width / self.heatmap_stride)
    }

    fn margin(&self) -> f64 {
        (2.0 * self.blob_sigma).ceil().max(2.0)
    }

    /// Heatmap for keypoints given in image pixels.
    pub fn target_for(&self, keypoints: &[(f64, f64)]) -> Result<Tensor4<f32>> {
        let s = self.heatmap_stride as f64;
        let (h, w) = self.heatmap_size();
        let scaled: Vec<_> = keypoints.iter().map(|&(x, y)| (x / s, y / s)).collect();
        heatmap_target(&scaled, h, w, self.heatmap_sigma / s)
    }

    /// Sample `index`; each index reads its own random stream.
    pub fn sample(&self, index: usize) -> Result<SynthSample> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let (h, w) = (self.height as f64, self.width as f64);
        let m = self.margin();
        let (dx, dy) = self.displacement;
        let range = |lo: f64, hi: f64| -> Result<(i64, i64)> {
            let (a, b) = (lo.ceil() as i64, hi.floor() as i64);
            if a > b {
                return Err(Error::Generation(format!(
                    "no room for cue and target separated by ({dx}, {dy})"
                )));
            }
            Ok((a, b))
        };
        let xr = range(m.max(m - dx), (w - 1.0 - m).min(w - 1.0 - m - dx))?;
        let yr = range(m.max(m - dy), (h - 1.0 - m).min(h - 1.0 - m - dy))?;
        let cue = (rng.gen_range(xr.0..=xr.1) as f64, rng.gen_range(yr.0..=yr.1) as f64);
        let target = (cue.0 + dx, cue.1 + dy);

        let min_sep = (4.0 * self.blob_sigma).max(3.0);
        let mut blobs = vec![target];
        let mut distractors = Vec::with_capacity(self.distractors);
        for _ in 0..self.distractors {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let p = (
                    rng.gen_range(m as i64..=(w - 1.0 - m) as i64) as f64,
                    rng.gen_range(m as i64..=(h - 1.0 - m) as i64) as f64,
                );
                if blobs.iter().all(|b| (b.0 - p.0).hypot(b.1 - p.1) >= min_sep) {
                    blobs.push(p);
                    distractors.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "could not place {} distractors in a {}x{} image",
                    self.distractors, self.height, self.width
                )));
            }
        }

        let shape = Shape4::new(1, SYNTH_CHANNELS, self.height, self.width);
        let mut image = Tensor4::<f32>::zeros(shape);
        for &b in &blobs {
            splat(image.plane_mut(0, 0), self.width, b, self.blob_sigma);
        }
        splat(image.plane_mut(0, 1), self.width, cue, self.cue_sigma);
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).expect("validated noise");
            for v in image.data_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        let keypoints = vec![target];
        Ok(SynthSample {
            image,
            target: self.target_for(&keypoints)?,
            keypoints,
            distractors,
        })
    }

    pub fn generate(&self) -> Result<Vec<SynthSample>> {
        (0..self.count).map(|i| self.sample(i)).collect()
    }
}

fn splat(plane: &mut [f32], width: usize, (cx, cy): (f64, f64), sigma: f64) {
    let denom = 2.0 * sigma * sigma;
    for (i, v) in plane.iter_mut().enumerate() {
        let (x, y) = ((i % width) as f64, (i / width) as f64);
        *v += (-((x - cx).powi(2) + (y - cy).powi(2)) / denom).exp() as f32;
    }
}

/// Local baseline: argmax of a 3x3 box filter over channel 0.
pub fn matched_filter_locate(sample: &SynthSample) -> (usize, usize) {
    let s = sample.image.shape();
    let plane = sample.image.plane(0, 0);
    let (h, w) = (s.height as isize, s.width as isize);
    let mut best = (f32::NEG_INFINITY, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for oy in -1..=1 {
                for ox in -1..=1 {
                    let (sx, sy) = (x + ox, y + oy);
                    if sx >= 0 && sy >= 0 && sx < w && sy < h {
                        acc += plane[(sy * w + sx) as usize];
                    }
                }
            }
            if acc > best.0 {
                best = (acc, x as usize, y as usize);
            }
        }
    }
    (best.1, best.2)
}

/// Fraction of samples whose located position is within one pixel of the
/// first keypoint.
pub fn matched_filter_accuracy(samples: &[SynthSample]) -> f64 {
    let hits = samples
        .iter()
        .filter(|s| {
            let (x, y) = matched_filter_locate(s);
            let (kx, ky) = s.keypoints[0];
            (x as f64 - kx).abs() <= 1.0 && (y as f64 - ky).abs() <= 1.0
        })
        .count();
    hits as f64 / samples.len().max(1) as f64
}

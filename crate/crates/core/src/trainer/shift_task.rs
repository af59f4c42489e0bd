//! Shifted-copy regression: the target is the input read at a fixed
//! displacement, `target(x, y) = image(x + dx, y + dy)` with zero fill.
//! An FSM solves it exactly with one shifting channel at offset `-d`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bilinear_sample, Shape4, Tensor4};

use super::synth::SynthSample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftTaskSpec {
    pub height: usize,
    pub width: usize,
    /// `d`: where each output pixel reads from, relative to itself.
    pub displacement: (f64, f64),
    /// Gaussian smoothing of the white-noise images, in pixels.
    pub smoothing: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for ShiftTaskSpec {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            displacement: (3.0, -2.0),
            smoothing: 2.0,
            count: 64,
            seed: 0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with zero padding.
fn blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (sx, sy) = if horizontal { (x + o, y) } else { (x, y + o) };
                    if sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize {
                        acc += kv * src[sy as usize * w + sx as usize];
                    }
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

impl ShiftTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (dx, dy) = self.displacement;
        if self.height == 0 || self.width == 0 || self.count == 0 {
            return Err(Error::Config("shift task sizes and count must be positive".into()));
        }
        if !(self.smoothing > 0.0) || !dx.is_finite() || !dy.is_finite() {
            return Err(Error::Config("shift task smoothing must be positive and the displacement finite".into()));
        }
        Ok(())
    }

    /// Unit-variance smoothed noise images with their shifted copies as
    /// targets, both `[1, 1, H, W]`.
    pub fn generate(&self) -> Result<Vec<SynthSample>> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let shape = Shape4::new(1, 1, h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.count);
        for _ in 0..self.count {
            let noise: Vec<f64> = (0..h * w).map(|_| normal.sample(&mut rng)).collect();
            let mut img = blur(&noise, h, w, self.smoothing);
            let sd = (img.iter().map(|v| v * v).sum::<f64>() / (h * w) as f64).sqrt();
            img.iter_mut().for_each(|v| *v /= sd);
            let (dx, dy) = self.displacement;
            let mut target = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    target.push(bilinear_sample(&img, h, w, x as f64 + dx, y as f64 + dy));
                }
            }
            let cast = |v: Vec<f64>| Tensor4::from_vec(shape, v.into_iter().map(|x| x as f32).collect());
            out.push(SynthSample {
                image: cast(img)?,
                keypoints: Vec::new(),
                target: cast(target)?,
                distractors: Vec::new(),
            });
        }
        Ok(out)
    }
}

//! Gaussian heatmap targets and argmax decoding.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

/// One `[1, M, H, W]` target: channel `m` holds
/// `exp(-((x - x_m)^2 + (y - y_m)^2) / (2 sigma^2))`, keypoints given in
/// grid units as `(x, y)`.
pub fn heatmap_target<T: Real>(keypoints: &[(f64, f64)], height: usize, width: usize, sigma: f64) -> Result<Tensor4<T>> {
    if !(sigma > 0.0) {
        return Err(Error::Argument(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let mut out = Tensor4::zeros(Shape4::new(1, keypoints.len().max(1), height, width));
    let denom = 2.0 * sigma * sigma;
    for (m, &(kx, ky)) in keypoints.iter().enumerate() {
        let plane = out.plane_mut(0, m);
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - kx).powi(2) + (y as f64 - ky).powi(2);
                plane[y * width + x] = T::c((-d2 / denom).exp());
            }
        }
    }
    Ok(out)
}

/// Per sample and channel, the `(x, y)` of the maximum. Ties go to the
/// lowest `y`, then the lowest `x`.
pub fn decode_heatmap<T: Real>(maps: &Tensor4<T>) -> Vec<Vec<(usize, usize)>> {
    let s = maps.shape();
    (0..s.batch)
        .map(|b| {
            (0..s.channels)
                .map(|c| {
                    let plane = maps.plane(b, c);
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    (best % s.width, best / s.width)
                })
                .collect()
        })
        .collect()
}

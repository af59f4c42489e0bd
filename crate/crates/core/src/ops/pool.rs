use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn out_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    pub fn out_shape(&self, s: Shape4) -> Shape4 {
        Shape4::new(s.batch, s.channels, self.out_extent(s.height), self.out_extent(s.width))
    }
}

/// Max pooling with implicit `-inf` padding. Returns the output and, per
/// output element, the flat input index that won (first maximum in
/// row-major window order).
pub fn max_pool_forward<T: Real>(x: &Tensor4<T>, g: &PoolGeom) -> (Tensor4<T>, Vec<usize>) {
    let s = x.shape();
    let os = g.out_shape(s);
    let mut out = Tensor4::zeros(os);
    let mut arg = Vec::with_capacity(os.numel());
    for b in 0..s.batch {
        for c in 0..s.channels {
            let base = s.index(b, c, 0, 0);
            let plane = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for oy in 0..os.height {
                for ox in 0..os.width {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= s.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= s.width as isize {
                                continue;
                            }
                            let i = iy as usize * s.width + ix as usize;
                            if plane[i] > best || best_i == usize::MAX {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    dst[oy * os.width + ox] = best;
                    arg.push(base + best_i);
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Real>(input_shape: Shape4, argmax: &[usize], dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    dx
}

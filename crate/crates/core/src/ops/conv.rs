//! 2-D convolution via im2col. A 1x1/stride-1 convolution reads the input
//! planes directly without unfolding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    pub fn out_shape(&self, input: Shape4) -> Shape4 {
        Shape4::new(
            input.batch,
            self.out_channels,
            self.out_extent(input.height),
            self.out_extent(input.width),
        )
    }

    pub fn check(&self, input: Shape4, weight_len: usize, bias_len: Option<usize>) -> Result<()> {
        if input.channels != self.in_channels {
            return Err(Error::dim("input channels", self.in_channels, input.channels));
        }
        if weight_len != self.weight_len() {
            return Err(Error::dim("weight elements", self.weight_len(), weight_len));
        }
        if let Some(b) = bias_len {
            if b != self.out_channels {
                return Err(Error::dim("bias elements", self.out_channels, b));
            }
        }
        if input.height + 2 * self.pad < self.kernel || input.width + 2 * self.pad < self.kernel {
            return Err(Error::Argument(format!(
                "kernel {} larger than padded input {}x{}",
                self.kernel, input.height, input.width
            )));
        }
        Ok(())
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `[0, width)`.
fn valid_cols(g: &ConvGeom, kx: usize, width: usize, ow: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if width + g.pad > kx {
        ((width + g.pad - kx - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    lo..hi.max(lo)
}

fn im2col<T: Real>(x: &Tensor4<T>, b: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [T]) {
    let s = x.shape();
    let p = oh * ow;
    let k = g.kernel;
    for ci in 0..g.in_channels {
        let plane = x.plane(b, ci);
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                let valid = valid_cols(g, kx, s.width, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= s.height as isize || valid.is_empty() {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.width..(iy as usize + 1) * s.width];
                    dst[..valid.start].fill(T::zero());
                    dst[valid.end..].fill(T::zero());
                    let ix0 = valid.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[valid.clone()].copy_from_slice(&src[ix0..ix0 + valid.len()]);
                    } else {
                        for (j, d) in dst[valid.clone()].iter_mut().enumerate() {
                            *d = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(dcols: &[T], g: &ConvGeom, oh: usize, ow: usize, dx: &mut Tensor4<T>, b: usize) {
    let s = dx.shape();
    let p = oh * ow;
    let k = g.kernel;
    for ci in 0..g.in_channels {
        let plane = dx.plane_mut(b, ci);
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &dcols[r * p..(r + 1) * p];
                let valid = valid_cols(g, kx, s.width, ow);
                if valid.is_empty() {
                    continue;
                }
                let ix0 = valid.start * g.stride + kx - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= s.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.width..(iy as usize + 1) * s.width];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (j, &v) in src[valid.clone()].iter().enumerate() {
                        dst[ix0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// `out[b,o,y,x] = bias[o] + sum_r w[o,r] * unfold(in)[r,(y,x)]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Result<Tensor4<T>> {
    g.check(x.shape(), w.len(), bias.map(|b| b.len()))?;
    let os = g.out_shape(x.shape());
    let (oh, ow) = (os.height, os.width);
    let p = oh * ow;
    let rows = g.rows();
    let oc = g.out_channels;
    let mut out = Tensor4::zeros(os);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    for b in 0..os.batch {
        let src: &[T] = if g.is_pointwise() {
            let n = g.in_channels * p;
            &x.data()[b * n..(b + 1) * n]
        } else {
            im2col(x, b, g, oh, ow, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[b * oc * p..(b + 1) * oc * p];
        let beta = match bias {
            Some(bias) => {
                for (o, row) in dst.chunks_exact_mut(p).enumerate() {
                    row.fill(bias[o]);
                }
                T::one()
            }
            None => T::zero(),
        };
        T::gemm(oc, rows, p, w, (rows, 1), src, (p, 1), beta, dst, (p, 1));
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    w: &[T],
    g: &ConvGeom,
    dy: &Tensor4<T>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let os = dy.shape();
    let (oh, ow) = (os.height, os.width);
    let p = oh * ow;
    let rows = g.rows();
    let mut dx = need_input.then(|| Tensor4::zeros(x.shape()));
    let mut dw = need_weight.then(|| vec![T::zero(); w.len()]);
    let mut db = need_bias.then(|| vec![T::zero(); g.out_channels]);
    let mut cols = if g.is_pointwise() || !need_weight {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    let mut dcols = if need_input && !g.is_pointwise() {
        vec![T::zero(); rows * p]
    } else {
        Vec::new()
    };
    let oc = g.out_channels;
    for b in 0..os.batch {
        let gy = &dy.data()[b * oc * p..(b + 1) * oc * p];
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dy.plane(b, o).iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                let n = g.in_channels * p;
                &x.data()[b * n..(b + 1) * n]
            } else {
                im2col(x, b, g, oh, ow, &mut cols);
                &cols
            };
            T::gemm(oc, p, rows, gy, (p, 1), src, (1, p), T::one(), dw, (rows, 1));
        }
        if let Some(dx) = dx.as_mut() {
            if g.is_pointwise() {
                let n = g.in_channels * p;
                let dst = &mut dx.data_mut()[b * n..(b + 1) * n];
                T::gemm(rows, oc, p, w, (1, rows), gy, (p, 1), T::one(), dst, (p, 1));
            } else {
                T::gemm(rows, oc, p, w, (1, rows), gy, (p, 1), T::zero(), &mut dcols, (p, 1));
                col2im(&dcols, g, oh, ow, dx, b);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

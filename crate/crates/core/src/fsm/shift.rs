//! Per-channel fractional translation with zero fill.
//!
//! Channel `k` of the output reads the input at `(x - dx[k], y - dy[k])`
//! through bilinear interpolation. Because the offset is shared by every
//! pixel of a channel, the four interpolation weights are constant per
//! channel and the op reduces to four weighted, clipped plane translations.

use crate::error::{Error, Result};
use crate::param::ParamTensor;
use crate::tensor::{Real, Shape4, Tensor4};

/// Offsets in pixels; positive `dx` moves content toward increasing x.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftOffsets<T> {
    pub dx: Vec<T>,
    pub dy: Vec<T>,
}

impl<T: Real> ShiftOffsets<T> {
    pub fn new(dx: Vec<T>, dy: Vec<T>) -> Result<Self> {
        if dx.len() != dy.len() {
            return Err(Error::dim("offset dy length", dx.len(), dy.len()));
        }
        Ok(Self { dx, dy })
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            dx: vec![T::zero(); k],
            dy: vec![T::zero(); k],
        }
    }

    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    /// Reads a `[K, 2]` parameter laid out as `(dx, dy)` pairs.
    pub fn from_interleaved(values: &[T]) -> Self {
        Self {
            dx: values.iter().step_by(2).copied().collect(),
            dy: values.iter().skip(1).step_by(2).copied().collect(),
        }
    }

    pub fn to_interleaved(&self) -> Vec<T> {
        self.dx
            .iter()
            .zip(&self.dy)
            .flat_map(|(&x, &y)| [x, y])
            .collect()
    }

    pub fn from_param(p: &ParamTensor<T>) -> Self {
        Self::from_interleaved(&p.values)
    }
}

/// Integer base shift and fractional weights of one channel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps<T> {
    pub ox: isize,
    pub oy: isize,
    pub fx: T,
    pub fy: T,
}

impl<T: Real> Taps<T> {
    pub fn new(dx: T, dy: T) -> Self {
        let (ux, uy) = (-dx, -dy);
        let (bx, by) = (ux.floor(), uy.floor());
        Self {
            ox: bx.to_f64() as isize,
            oy: by.to_f64() as isize,
            fx: ux - bx,
            fy: uy - by,
        }
    }

    pub fn weights(&self) -> [(isize, isize, T); 4] {
        let one = T::one();
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.oy, self.ox, (one - fy) * (one - fx)),
            (self.oy, self.ox + 1, (one - fy) * fx),
            (self.oy + 1, self.ox, fy * (one - fx)),
            (self.oy + 1, self.ox + 1, fy * fx),
        ]
    }
}

/// Valid destination range for a translation by `s` over `n` cells.
#[inline]
fn span(s: isize, n: usize) -> (usize, usize) {
    let n = n as isize;
    let lo = (-s).clamp(0, n);
    let hi = (n - s).clamp(0, n);
    (lo as usize, hi.max(lo) as usize)
}

/// `dst[y][x] += w * src[y+sy][x+sx]` wherever the source is in view.
fn translate_add<T: Real>(dst: &mut [T], src: &[T], h: usize, w: usize, sy: isize, sx: isize, wt: T) {
    let (y0, y1) = span(sy, h);
    let (x0, x1) = span(sx, w);
    if x0 == x1 {
        return;
    }
    for y in y0..y1 {
        let sy_row = (y as isize + sy) as usize * w;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s = &src[(sy_row as isize + x0 as isize + sx) as usize..(sy_row as isize + x1 as isize + sx) as usize];
        for (a, &b) in d.iter_mut().zip(s) {
            *a += wt * b;
        }
    }
}

/// `src[y+sy][x+sx] += w * dst[y][x]`, the adjoint of [`translate_add`].
fn translate_add_adjoint<T: Real>(
    grad_src: &mut [T],
    grad_dst: &[T],
    h: usize,
    w: usize,
    sy: isize,
    sx: isize,
    wt: T,
) {
    let (y0, y1) = span(sy, h);
    let (x0, x1) = span(sx, w);
    if x0 == x1 {
        return;
    }
    for y in y0..y1 {
        let sy_row = (y as isize + sy) as usize * w;
        let g = &grad_dst[y * w + x0..y * w + x1];
        let s = &mut grad_src
            [(sy_row as isize + x0 as isize + sx) as usize..(sy_row as isize + x1 as isize + sx) as usize];
        for (a, &b) in s.iter_mut().zip(g) {
            *a += wt * b;
        }
    }
}

/// `sum_{y,x} g[y][x] * src[y+sy][x+sx]`.
fn correlate<T: Real>(g: &[T], src: &[T], h: usize, w: usize, sy: isize, sx: isize) -> T {
    let (y0, y1) = span(sy, h);
    let (x0, x1) = span(sx, w);
    let mut acc = T::zero();
    if x0 == x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy_row = (y as isize + sy) as usize * w;
        let gr = &g[y * w + x0..y * w + x1];
        let s = &src[(sy_row as isize + x0 as isize + sx) as usize..(sy_row as isize + x1 as isize + sx) as usize];
        for (&a, &b) in gr.iter().zip(s) {
            acc += a * b;
        }
    }
    acc
}

fn check_len<T: Real>(s: Shape4, offsets: &ShiftOffsets<T>) -> Result<()> {
    if offsets.len() != s.channels {
        return Err(Error::dim("shift offsets (K)", s.channels, offsets.len()));
    }
    Ok(())
}

pub fn shift_forward<T: Real>(maps: &Tensor4<T>, offsets: &ShiftOffsets<T>) -> Result<Tensor4<T>> {
    let s = maps.shape();
    check_len(s, offsets)?;
    let mut out = Tensor4::zeros(s);
    for k in 0..s.channels {
        let taps = Taps::new(offsets.dx[k], offsets.dy[k]);
        for b in 0..s.batch {
            let src = maps.plane(b, k).to_vec();
            let dst = out.plane_mut(b, k);
            for (sy, sx, wt) in taps.weights() {
                if wt != T::zero() {
                    translate_add(dst, &src, s.height, s.width, sy, sx, wt);
                }
            }
        }
    }
    Ok(out)
}

pub struct ShiftGrads<T> {
    pub maps: Option<Tensor4<T>>,
    pub dx: Vec<T>,
    pub dy: Vec<T>,
}

/// Gradients of the shift w.r.t. its input maps and its offsets.
/// `d out / d dx = -(d R* / d x)` at the sample point; cells read from
/// outside the view contribute nothing.
pub fn shift_backward<T: Real>(
    maps: &Tensor4<T>,
    offsets: &ShiftOffsets<T>,
    upstream: &Tensor4<T>,
    need_maps: bool,
) -> Result<ShiftGrads<T>> {
    let s = maps.shape();
    check_len(s, offsets)?;
    maps.check_same(upstream)?;
    let (h, w) = (s.height, s.width);
    let mut gmaps = need_maps.then(|| Tensor4::zeros(s));
    let mut gdx = vec![T::zero(); s.channels];
    let mut gdy = vec![T::zero(); s.channels];
    let one = T::one();
    for k in 0..s.channels {
        let taps = Taps::new(offsets.dx[k], offsets.dy[k]);
        let (ox, oy, fx, fy) = (taps.ox, taps.oy, taps.fx, taps.fy);
        let (mut acc_x, mut acc_y) = (T::zero(), T::zero());
        for b in 0..s.batch {
            let g = upstream.plane(b, k);
            let src = maps.plane(b, k);
            let c00 = correlate(g, src, h, w, oy, ox);
            let c01 = correlate(g, src, h, w, oy, ox + 1);
            let c10 = correlate(g, src, h, w, oy + 1, ox);
            let c11 = correlate(g, src, h, w, oy + 1, ox + 1);
            let d_fx = (one - fy) * (c01 - c00) + fy * (c11 - c10);
            let d_fy = (one - fx) * (c10 - c00) + fx * (c11 - c01);
            // fx = -dx - floor(-dx)
            acc_x -= d_fx;
            acc_y -= d_fy;
            if let Some(gm) = gmaps.as_mut() {
                let dst = gm.plane_mut(b, k);
                for (sy, sx, wt) in taps.weights() {
                    if wt != T::zero() {
                        translate_add_adjoint(dst, g, h, w, sy, sx, wt);
                    }
                }
            }
        }
        gdx[k] = acc_x;
        gdy[k] = acc_y;
    }
    Ok(ShiftGrads {
        maps: gmaps,
        dx: gdx,
        dy: gdy,
    })
}

/// Integer part of each channel's sampling displacement; the shift is
/// smooth in the offsets while these stay fixed.
pub(crate) fn regime<T: Real>(offsets: &ShiftOffsets<T>) -> impl Iterator<Item = i64> + '_ {
    offsets.dx.iter().zip(&offsets.dy).flat_map(|(&dx, &dy)| {
        let t = Taps::new(dx, dy);
        [t.ox as i64, t.oy as i64]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bilinear_sample;

    fn one(dx: f64, dy: f64) -> ShiftOffsets<f64> {
        ShiftOffsets::new(vec![dx], vec![dy]).unwrap()
    }

    #[test]
    fn integer_shift_translates_with_zero_fill() {
        let m = Tensor4::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let out = shift_forward(&m, &one(1.0, 0.0)).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.0, 3.0]);
    }

    #[test]
    fn half_pixel_shift_interpolates() {
        let m = Tensor4::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let out = shift_forward(&m, &one(0.5, 0.0)).unwrap();
        assert_eq!(out.data(), &[0.5, 1.5, 1.5, 3.5]);
    }

    #[test]
    fn zero_offsets_are_identity() {
        let s = Shape4::new(2, 3, 4, 5);
        let m = Tensor4::<f64>::from_vec(s, (0..s.numel()).map(|i| (i as f64).sin()).collect()).unwrap();
        let out = shift_forward(&m, &ShiftOffsets::zeros(3)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn k_mismatch_is_dimension_error() {
        let m = Tensor4::<f64>::zeros(Shape4::new(1, 2, 3, 3));
        let err = shift_forward(&m, &one(0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, actual: 1, .. }));
    }

    #[test]
    fn matches_pointwise_bilinear_sampling() {
        let s = Shape4::new(1, 3, 5, 6);
        let m = Tensor4::<f64>::from_vec(s, (0..s.numel()).map(|i| ((i * 7919) % 23) as f64 - 11.0).collect()).unwrap();
        let off = ShiftOffsets::new(vec![0.3, -1.7, 4.25], vec![-2.6, 0.45, 1.0]).unwrap();
        let out = shift_forward(&m, &off).unwrap();
        for k in 0..3 {
            for y in 0..5 {
                for x in 0..6 {
                    let e = bilinear_sample(m.plane(0, k), 5, 6, x as f64 - off.dx[k], y as f64 - off.dy[k]);
                    assert!((out.at(0, k, y, x) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn integer_shift_gradient_is_inverse_translation() {
        let m = Tensor4::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]).unwrap();
        let up = Tensor4::filled(m.shape(), 1.0);
        let g = shift_backward(&m, &one(1.0, -1.0), &up, true).unwrap();
        // input pixel (y, x) lands at (y - 1, x + 1); it survives iff that is in view
        let expect = [0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(g.maps.unwrap().data(), &expect);
    }

    #[test]
    fn constant_map_has_zero_offset_gradient_in_interior() {
        let s = Shape4::new(1, 1, 9, 9);
        let m = Tensor4::<f64>::filled(s, 3.0);
        // upstream supported only where the sample footprint stays inside
        let mut up = Tensor4::zeros(s);
        for y in 3..6 {
            for x in 3..6 {
                up.set(0, 0, y, x, 1.0 + (x * y) as f64);
            }
        }
        let g = shift_backward(&m, &one(0.4, -0.7), &up, false).unwrap();
        assert_eq!(g.dx[0], 0.0);
        assert_eq!(g.dy[0], 0.0);
    }

    #[test]
    fn shift_past_the_border_empties_the_map() {
        let maps = Tensor4::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        for (dx, dy) in [(-3.0, 0.0), (2.5, 1.0), (0.0, -2.0), (-2.6, 2.4)] {
            let off = ShiftOffsets::new(vec![dx], vec![dy]).unwrap();
            let out = shift_forward(&maps, &off).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0), "({dx}, {dy})");
            let g = shift_backward(&maps, &off, &Tensor4::filled(maps.shape(), 1.0), true).unwrap();
            assert!(g.maps.unwrap().data().iter().all(|&v| v == 0.0));
            assert_eq!((g.dx[0], g.dy[0]), (0.0, 0.0));
        }
    }
}

//! Dense rank-4 tensors in (batch, channel, height, width) order.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type used by every kernel. Implemented for `f32` (training) and
/// `f64` (gradient checking).
pub trait Real:
    Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn c(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::c(v as f64)
    }

    /// `c = a b + beta c` for strided `m x k` and `k x n` operands, strides
    /// given as (row, column). Single-threaded with a fixed blocking, so
    /// results are reproducible.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), beta: Self, c: &mut [Self], sc: (usize, usize));
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

impl Real for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), beta: Self, c: &mut [Self], sc: (usize, usize)) {
        check_extent(a.len(), m, k, sa);
        check_extent(b.len(), k, n, sb);
        check_extent(c.len(), m, n, sc);
        // SAFETY: every index the kernel touches was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                beta,
                c.as_mut_ptr(),
                sc.0 as isize,
                sc.1 as isize,
            )
        }
    }

    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), beta: Self, c: &mut [Self], sc: (usize, usize)) {
        check_extent(a.len(), m, k, sa);
        check_extent(b.len(), k, n, sb);
        check_extent(c.len(), m, n, sc);
        // SAFETY: every index the kernel touches was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                beta,
                c.as_mut_ptr(),
                sc.0 as isize,
                sc.1 as isize,
            )
        }
    }

    #[inline]
    fn c(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub const fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    fn validate(&self) -> Result<()> {
        for (axis, v) in [
            ("batch", self.batch),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
        ] {
            if v == 0 {
                return Err(Error::Argument(format!("tensor {axis} must be >= 1")));
            }
        }
        Ok(())
    }
}

impl Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Values drawn uniformly from `[lo, hi)` by a ChaCha8 stream seeded
    /// with `seed`.
    pub fn uniform(shape: Shape4, lo: f64, hi: f64, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self {
            shape,
            data: (0..shape.numel()).map(|_| T::c(rng.gen_range(lo..hi))).collect(),
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::dim("values", shape.numel(), data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Builds a single-sample, single-channel tensor from rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(h * w);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != w {
                return Err(Error::dim(format!("row {i} width"), w, r.len()));
            }
            data.extend(r.iter().map(|&v| T::c(v)));
        }
        Self::from_vec(Shape4::new(1, 1, h, w), data)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(b, c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (b * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (b * self.shape.channels + c) * p;
        &mut self.data[start..start + p]
    }

    /// Copy of one batch entry as a batch-of-one tensor.
    pub fn sample(&self, b: usize) -> Self {
        let n = self.shape.channels * self.shape.plane();
        Self {
            shape: Shape4 { batch: 1, ..self.shape },
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    /// Concatenates batch-of-any tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero tensors".into()))?;
        let s = first.shape;
        let mut data = Vec::new();
        let mut batch = 0;
        for t in items {
            if t.shape.channels != s.channels {
                return Err(Error::dim("channels", s.channels, t.shape.channels));
            }
            if t.shape.height != s.height {
                return Err(Error::dim("height", s.height, t.shape.height));
            }
            if t.shape.width != s.width {
                return Err(Error::dim("width", s.width, t.shape.width));
            }
            batch += t.shape.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: Shape4 { batch, ..s },
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        let (a, b) = (self.shape, other.shape);
        for (axis, x, y) in [
            ("batch", a.batch, b.batch),
            ("channels", a.channels, b.channels),
            ("height", a.height, b.height),
            ("width", a.width, b.width),
        ] {
            if x != y {
                return Err(Error::dim(axis, x, y));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    /// Largest elementwise difference relative to `max(1, |a|, |b|)`.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let (a, b) = (a.to_f64(), b.to_f64());
                (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::c(v.to_f64())).collect(),
        }
    }
}

/// Bilinear sample of a row-major `height x width` plane at column `x`,
/// row `y`. Grid points outside the plane read as zero.
pub fn bilinear_sample<T: Real>(plane: &[T], height: usize, width: usize, x: T, y: T) -> T {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let read = |yy: T, xx: T| -> T {
        if yy < T::zero() || xx < T::zero() {
            return T::zero();
        }
        let (yi, xi) = (yy.to_f64() as usize, xx.to_f64() as usize);
        if yi >= height || xi >= width {
            T::zero()
        } else {
            plane[yi * width + xi]
        }
    };
    let one = T::one();
    let mut acc = T::zero();
    for (dy, wy) in [(T::zero(), one - fy), (one, fy)] {
        for (dx, wx) in [(T::zero(), one - fx), (one, fx)] {
            let w = wy * wx;
            if w != T::zero() {
                acc += w * read(y0 + dy, x0 + dx);
            }
        }
    }
    acc
}

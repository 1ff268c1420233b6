//! Dense 4-D tensors in `(batch, channel, height, width)` order.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use num_traits::Float;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (training and
/// inference) and `f64` (gradient checking).
pub trait Scalar:
    num_traits::Float
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices whose extents cover the strided
        // m×k, k×n and m×n views.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn lit(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> f32 {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn lit(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        StandardNormal.sample(rng)
    }
}

/// Extent of a tensor along its four axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Tensor with i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let std = T::lit(std);
        let data = (0..shape.numel())
            .map(|_| T::sample_normal(rng) * std)
            .collect();
        Tensor { shape, data }
    }

    /// Tensor with i.i.d. entries uniform in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::lit(rng.random_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `(h, w)` plane for one image and channel.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of one batch item as a `(1, c, h, w)` tensor.
    pub fn item(&self, n: usize) -> Tensor<T> {
        let len = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// A single channel of every batch item as `(n, 1, h, w)`.
    pub fn channel(&self, c: usize) -> Tensor<T> {
        let mut out = Tensor::zeros(Shape::new(self.shape.n, 1, self.shape.h, self.shape.w));
        for n in 0..self.shape.n {
            out.plane_mut(n, 0).copy_from_slice(self.plane(n, c));
        }
        out
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::lit(f64::NEG_INFINITY), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::lit(f64::INFINITY), T::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Largest absolute element-wise difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(0, 1, 0, 0), 3.0);
        assert_eq!(t.plane(0, 1), &[3.0, 4.0]);
    }

    #[test]
    fn cast_roundtrip_f32_f64() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3), vec![0.1, -2.5, 3.0]).unwrap();
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }

    #[test]
    fn gemm_small() {
        // [1 2; 3 4] * [5; 6] = [17; 39]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0];
        let mut c = [0.0f64; 2];
        f64::gemm(2, 2, 1, 1.0, &a, 2, 1, &b, 1, 1, 0.0, &mut c, 1, 1);
        assert_eq!(c, [17.0, 39.0]);
    }
}

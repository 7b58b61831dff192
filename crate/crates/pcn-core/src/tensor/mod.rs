//! Dense 4-D tensors and the scalar abstraction they are generic over.
//!
//! Everything downstream (networks, training, metrics) runs on [`Grid4`], a
//! row-major `(n, c, h, w)` array of either `f32` or `f64`. Single precision is
//! the storage format used for training and files; double precision is used by
//! the gradient-check and adjointness tests, which need headroom below their
//! tolerances.

use crate::{Error, Result};

pub mod ops;

// ============================================================================
// Scalar abstraction
// ============================================================================

/// Element type of a tensor file or checkpoint: single (`f32`) or double
/// (`f64`) precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Single,
    Double,
}

impl Dtype {
    /// Byte tag used in file headers.
    pub fn code(self) -> u8 {
        match self {
            Dtype::Single => 0,
            Dtype::Double => 1,
        }
    }

    /// Inverse of [`Dtype::code`].
    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::Single),
            1 => Some(Dtype::Double),
            _ => None,
        }
    }

    /// Size of one element in bytes.
    pub fn size(self) -> usize {
        match self {
            Dtype::Single => 4,
            Dtype::Double => 8,
        }
    }
}

/// Floating-point element of a [`Grid4`].
///
/// Implemented for `f32` and `f64` only. The trait carries exactly the
/// operations the kernels need, so generic code stays readable and there is no
/// question about which intrinsic an operation maps to.
pub trait Scalar:
    Copy
    + Clone
    + PartialEq
    + PartialOrd
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::Single;
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;

    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    fn max(self, other: f32) -> f32 {
        f32::max(self, other)
    }
    fn min(self, other: f32) -> f32 {
        f32::min(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::Double;
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;

    fn from_f64(v: f64) -> f64 {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn max(self, other: f64) -> f64 {
        f64::max(self, other)
    }
    fn min(self, other: f64) -> f64 {
        f64::min(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

// ============================================================================
// Grid4
// ============================================================================

/// Dense 4-D array with dimensions `(n, c, h, w)` stored row-major
/// (`w` fastest), the layout every kernel in [`ops`] assumes.
///
/// The data length always equals the product of the dimensions; constructors
/// enforce it and nothing can break it afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid4<E> {
    dims: [usize; 4],
    data: Vec<E>,
}

impl<E: Scalar> Grid4<E> {
    /// Zero-filled grid. Panics if any dimension is zero or the element count
    /// overflows; sizes are always caller-controlled constants or validated
    /// config values, so that is a programming error rather than bad input.
    pub fn zeros(dims: [usize; 4]) -> Grid4<E> {
        assert!(
            dims.iter().all(|&d| d > 0),
            "grid dimensions must be positive, got {dims:?}"
        );
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .expect("grid element count overflows usize");
        Grid4 {
            dims,
            data: vec![E::ZERO; len],
        }
    }

    /// Constant-filled grid.
    pub fn filled(dims: [usize; 4], value: E) -> Grid4<E> {
        let mut g = Grid4::zeros(dims);
        g.data.fill(value);
        g
    }

    /// Build a grid from row-major data. Errors if the data length does not
    /// match the dimension product or any dimension is zero.
    pub fn from_vec(dims: [usize; 4], data: Vec<E>) -> Result<Grid4<E>> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Value(format!(
                "grid dimensions must be positive, got {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "Grid4::from_vec element count",
                expected,
                data.len(),
            ));
        }
        Ok(Grid4 { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    pub fn h(&self) -> usize {
        self.dims[2]
    }
    pub fn w(&self) -> usize {
        self.dims[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> E {
        debug_assert!(n < self.dims[0] && c < self.dims[1] && i < self.dims[2] && j < self.dims[3]);
        self.data[((n * self.dims[1] + c) * self.dims[2] + i) * self.dims[3] + j]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: E) {
        debug_assert!(n < self.dims[0] && c < self.dims[1] && i < self.dims[2] && j < self.dims[3]);
        self.data[((n * self.dims[1] + c) * self.dims[2] + i) * self.dims[3] + j] = v;
    }

    /// One `(n, c)` plane as a row-major `h * w` slice.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[E] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Mutable variant of [`Grid4::plane`].
    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [E] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// True when all elements are finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert every element (used to move between storage and check precision).
    pub fn cast<F: Scalar>(&self) -> Grid4<F> {
        Grid4 {
            dims: self.dims,
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        }
    }

    /// Extract one image `(1, c, h, w)` from a batch.
    pub fn image(&self, n: usize) -> Grid4<E> {
        assert!(n < self.dims[0]);
        let chw = self.dims[1] * self.dims[2] * self.dims[3];
        Grid4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * chw..(n + 1) * chw].to_vec(),
        }
    }
}

// ============================================================================
// ConvKernel
// ============================================================================

/// One 3x3 convolution layer's parameters: weights plus a per-output-channel
/// bias.
///
/// Weight layout is `(a, b, 3, 3)`. Used as a forward convolution the kernel
/// maps `b` input channels to `a` output channels and the bias has length `a`.
/// Used as a transposed convolution (the exact adjoint) it maps `a` input
/// channels to `b` output channels and the bias has length `b`. The bias is
/// always added on the output side of whichever operation runs; each operation
/// validates the corresponding length.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<E> {
    pub weights: Grid4<E>,
    pub bias: Vec<E>,
}

impl<E: Scalar> ConvKernel<E> {
    /// Zero kernel for a forward convolution mapping `c_in` -> `c_out`.
    pub fn zeros_conv(c_out: usize, c_in: usize) -> ConvKernel<E> {
        ConvKernel {
            weights: Grid4::zeros([c_out, c_in, 3, 3]),
            bias: vec![E::ZERO; c_out],
        }
    }

    /// Zero kernel for a transposed convolution mapping `c_in` -> `c_out`.
    pub fn zeros_deconv(c_in: usize, c_out: usize) -> ConvKernel<E> {
        ConvKernel {
            weights: Grid4::zeros([c_in, c_out, 3, 3]),
            bias: vec![E::ZERO; c_out],
        }
    }

    /// Build from parts, checking the 3x3 spatial footprint and that the bias
    /// length matches one of the two legal orientations.
    pub fn new(weights: Grid4<E>, bias: Vec<E>) -> Result<ConvKernel<E>> {
        let d = weights.dims();
        if d[2] != 3 || d[3] != 3 {
            return Err(Error::shape("ConvKernel spatial size", "3x3", (d[2], d[3])));
        }
        if bias.len() != d[0] && bias.len() != d[1] {
            return Err(Error::shape(
                "ConvKernel bias length",
                format!("{} (conv) or {} (deconv)", d[0], d[1]),
                bias.len(),
            ));
        }
        Ok(ConvKernel { weights, bias })
    }

    #[inline]
    pub fn weight(&self, a: usize, b: usize, di: usize, dj: usize) -> E {
        self.weights.at(a, b, di, dj)
    }

    /// Number of scalar parameters (weights plus bias).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<F: Scalar>(&self) -> ConvKernel<F> {
        ConvKernel {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.all_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

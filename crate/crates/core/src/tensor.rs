//! Dense row-major tensors.
//!
//! Image-like tensors are stored height × width × channels, so the channel
//! values of one pixel are contiguous. Convolution kernels use the 4-D layout
//! `k × k × c_in × c_out`, which flattens to the `(k·k·c_in) × c_out` matrix
//! consumed by the im2col path in [`crate::tape`].

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Sign with `signum0(0) == 0`.
    #[inline]
    fn signum0(self) -> Self {
        if self > Self::zero() {
            Self::one()
        } else if self < Self::zero() {
            -Self::one()
        } else {
            Self::zero()
        }
    }

    /// `c = a · b (+ c when accumulate)`, with arbitrary row/column strides so
    /// that transposed operands need no copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows as isize - 1) * rs + (cols as isize - 1) * cs
                };
                assert!(k == 0 || last(m, k, rsa, csa) < a.len() as isize);
                assert!(k == 0 || last(k, n, rsb, csb) < b.len() as isize);
                assert!(c.len() >= m * n);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above keep every strided access in bounds,
                // and `c` is a distinct mutable slice.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Image-shaped tensor (`h × w × c`) filled by `f(y, x, ch)`.
    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self {
            shape: vec![h, w, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// `(height, width, channels)` of an image-shaped tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::Shape(format!(
                "expected an h×w×c tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn width(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn channels(&self) -> usize {
        self.shape.get(2).copied().unwrap_or(1)
    }

    /// Element of an image-shaped tensor.
    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copy of the `h × w` window whose top-left corner is `(top, left)`.
    pub fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let (sh, sw, c) = self.hwc()?;
        if h == 0 || w == 0 || top + h > sh || left + w > sw {
            return Err(Error::Shape(format!(
                "window ({top},{left},{h},{w}) outside {sh}×{sw}"
            )));
        }
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let start = (y * sw + left) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Self {
            shape: vec![h, w, c],
            data,
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2, 1], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 2, 1], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn window_extracts_rows() {
        let t = Tensor::<f64>::from_fn(4, 5, 2, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let w = t.window(1, 2, 2, 3).unwrap();
        assert_eq!(w.shape(), &[2, 3, 2]);
        assert_eq!(w.at(0, 0, 0), 120.0);
        assert_eq!(w.at(1, 2, 1), 241.0);
        assert!(t.window(3, 0, 2, 1).is_err());
    }

    #[test]
    fn gemm_with_transposed_operand() {
        // a: 2×3, b^T stored as 2×3 → b is 3×2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, &a, (3, 1), &bt, (1, 3), &mut c, false);
        assert_eq!(c, [4.0, 2.0, 10.0, 5.0]);
        f64::gemm(2, 3, 2, &a, (3, 1), &bt, (1, 3), &mut c, true);
        assert_eq!(c, [8.0, 4.0, 20.0, 10.0]);
    }
}

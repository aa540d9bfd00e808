//! Dense `H x W x D` grids and the handful of differentiable layers the
//! detector needs: 3x3 convolution, per-position linear maps, LeakyReLU,
//! sigmoid and bilinear resizing, each with an explicit backward pass.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod activation;
mod conv;
mod gradcheck;
mod linear;
mod optim;
mod params;
mod resize;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{config_err, Result};

pub use activation::{
    leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar, DEFAULT_LEAKY_SLOPE,
};
pub use conv::{
    conv3x3_backward, conv3x3_backward_strided, conv3x3_forward, conv3x3_forward_strided,
};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, Probe, SignatureHasher};
pub use linear::{linear_backward, linear_forward};
pub use optim::{optimizer_step, AdamWConfig, OptimState};
pub use params::{LayerKind, LayerParams};
pub use resize::{bilinear_resize, bilinear_resize_backward};

/// Floating point scalar used throughout the crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` for row/column strided matrices.
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// Converts an `f64` literal; every literal used by the crate is representable.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal converts to Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm_bounds<T>(rows: usize, cols: usize, strides: (isize, isize), buf: &[T]) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < buf.len(),
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_gemm_bounds(m, k, a_strides, a);
                check_gemm_bounds(k, n, b_strides, b);
                check_gemm_bounds(m, n, c_strides, c);
                // SAFETY: all three operands were bounds-checked above for the
                // given shapes and non-negative strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major `(y, x, d)` grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    height: usize,
    width: usize,
    depth: usize,
    values: Vec<T>,
}

impl<T: Real> Grid3<T> {
    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self::filled(height, width, depth, T::zero())
    }

    pub fn filled(height: usize, width: usize, depth: usize, value: T) -> Self {
        Self {
            height,
            width,
            depth,
            values: vec![value; height * width * depth],
        }
    }

    pub fn from_vec(height: usize, width: usize, depth: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width * depth {
            return config_err(format!(
                "grid {height}x{width}x{depth} needs {} values, got {}",
                height * width * depth,
                values.len()
            ));
        }
        Ok(Self {
            height,
            width,
            depth,
            values,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        depth: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * depth);
        for y in 0..height {
            for x in 0..width {
                for d in 0..depth {
                    values.push(f(y, x, d));
                }
            }
        }
        Self {
            height,
            width,
            depth,
            values,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.depth)
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize, d: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && d < self.depth);
        (y * self.width + x) * self.depth + d
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, d: usize) -> T {
        self.values[self.offset(y, x, d)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, d: usize, v: T) {
        let i = self.offset(y, x, d);
        self.values[i] = v;
    }

    /// Channel vector at one spatial position.
    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[T] {
        let start = (y * self.width + x) * self.depth;
        &self.values[start..start + self.depth]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let start = (y * self.width + x) * self.depth;
        &mut self.values[start..start + self.depth]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            depth: self.depth,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds `other` elementwise into `self`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_dims(other) {
            return config_err(format!(
                "cannot add {:?} into {:?}",
                other.dims(),
                self.dims()
            ));
        }
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// Concatenates along the channel axis, `self` first.
    pub fn concat_depth(&self, other: &Self) -> Result<Self> {
        if self.height != other.height || self.width != other.width {
            return config_err(format!(
                "channel concat needs equal spatial dims, got {:?} and {:?}",
                self.dims(),
                other.dims()
            ));
        }
        let depth = self.depth + other.depth;
        let mut values = Vec::with_capacity(self.height * self.width * depth);
        for p in 0..self.height * self.width {
            values.extend_from_slice(&self.values[p * self.depth..(p + 1) * self.depth]);
            values.extend_from_slice(&other.values[p * other.depth..(p + 1) * other.depth]);
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            depth,
            values,
        })
    }

    /// Inverse of [`Grid3::concat_depth`]: splits channels at `first_depth`.
    pub fn split_depth(&self, first_depth: usize) -> Result<(Self, Self)> {
        if first_depth > self.depth {
            return config_err(format!(
                "cannot split depth {} at {first_depth}",
                self.depth
            ));
        }
        let second = self.depth - first_depth;
        let n = self.height * self.width;
        let mut a = Vec::with_capacity(n * first_depth);
        let mut b = Vec::with_capacity(n * second);
        for p in 0..n {
            let cell = &self.values[p * self.depth..(p + 1) * self.depth];
            a.extend_from_slice(&cell[..first_depth]);
            b.extend_from_slice(&cell[first_depth..]);
        }
        Ok((
            Self {
                height: self.height,
                width: self.width,
                depth: first_depth,
                values: a,
            },
            Self {
                height: self.height,
                width: self.width,
                depth: second,
                values: b,
            },
        ))
    }

    /// Converts to another precision.
    pub fn cast<U: Real>(&self) -> Grid3<U> {
        Grid3 {
            height: self.height,
            width: self.width,
            depth: self.depth,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }
}

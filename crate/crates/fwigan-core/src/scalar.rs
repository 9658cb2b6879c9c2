//! Floating-point abstraction for the numerical kernels.
//!
//! All array math is generic over [`Scalar`] so the same code paths run in
//! `f32` (fast, loose tolerances) and `f64` (tight verification). Scalar
//! configuration (time steps, frequencies, learning rates) stays `f64`
//! everywhere and is converted at kernel boundaries.

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type of all field and tensor arrays.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Send
    + Sync
    + 'static
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
{
    /// Converts an `f64` constant; panics only on NaN inputs, which never
    /// occur for literal constants.
    fn fl(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    /// Widens to `f64` for reporting and scalar bookkeeping.
    fn f64(self) -> f64;

    /// General matrix multiply C = alpha*A·B + beta*C with explicit strides,
    /// dispatching to the tuned `matrixmultiply` kernels.
    ///
    /// # Safety
    /// Pointers must cover the strided extents implied by (m, k, n).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Sum of squares accumulated in the element type (fixed order).
pub fn sum_sq<T: Scalar>(xs: &[T]) -> T {
    let mut acc = T::zero();
    for &x in xs {
        acc += x * x;
    }
    acc
}

/// Euclidean norm in the element type.
pub fn norm2<T: Scalar>(xs: &[T]) -> T {
    sum_sq(xs).sqrt()
}

/// Dot product accumulated in the element type (fixed order).
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_identity() {
        // 2x2 identity times arbitrary matrix leaves it unchanged.
        let a = [1.0f64, 0.0, 0.0, 1.0];
        let b = [3.0, -1.0, 2.5, 7.0];
        let mut c = [0.0; 4];
        unsafe {
            f64::gemm(
                2,
                2,
                2,
                1.0,
                a.as_ptr(),
                2,
                1,
                b.as_ptr(),
                2,
                1,
                0.0,
                c.as_mut_ptr(),
                2,
                1,
            );
        }
        assert_eq!(c, b);
    }

    #[test]
    fn norm_and_dot() {
        let v = [3.0f64, 4.0];
        assert_eq!(norm2(&v), 5.0);
        assert_eq!(dot(&v, &v), 25.0);
        assert_eq!(sum_sq(&[0.5f32, 0.5]), 0.5);
    }
}

//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; gradient checks and oracle comparisons run the
//! same code paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `C = A·B` (or `C += A·B` when `accumulate`), with arbitrary strides.
    ///
    /// `A` is `m×k`, `B` is `k×n`, `C` is `m×n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    ) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for p in 0..k {
                    let av = a[(i as isize * rsa + p as isize * csa) as usize];
                    let bv = b[(p as isize * rsb + j as isize * csb) as usize];
                    acc += av * bv;
                }
                let idx = (i as isize * rsc + j as isize * csc) as usize;
                if accumulate {
                    c[idx] += acc;
                } else {
                    c[idx] = acc;
                }
            }
        }
    }

    /// Converts an `f64` constant.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

fn check_bounds(m: usize, k: usize, n: usize, len_a: usize, len_b: usize, len_c: usize) {
    // matrixmultiply works on raw pointers; the callers in this crate always
    // use dense row- or column-major layouts, so a size check is enough.
    assert!(len_a >= m * k && len_b >= k * n && len_c >= m * n, "gemm operand too small");
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    ) {
        check_bounds(m, k, n, a.len(), b.len(), c.len());
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: operand sizes checked above; strides describe dense layouts.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
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
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    ) {
        check_bounds(m, k, n, a.len(), b.len(), c.len());
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
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
            );
        }
    }
}

//! Reverse-mode differentiation substrate.
//!
//! Values live in dense row-major 2-D buffers. A [`Tape`] records every
//! forward operation together with whatever it needs for its adjoint; a
//! single [`Tape::backward`] call replays the record in reverse and returns
//! the parameter gradients as a [`Gradients`] set. Parameters themselves are
//! [`ParamArray`]s owned by the model; tapes only borrow them, so several
//! tapes can run concurrently over the same parameters and have their
//! gradient sets merged afterwards in a fixed order.

mod check;
mod param;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use check::{central_difference, grad_check, relative_error};
pub use param::{Gradients, ParamArray, ParamKey};
pub use tape::{Activation, CustomOp, Tape, Var};

/// Scalar type of a computation. Implemented for `f32` (training) and `f64`
/// (gradient checks and oracles).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn lit(v: f64) -> Self;
    fn erf(self) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b` (or `c += a · b` when `accumulate`), with `a` stored as
    /// `m×k` (or `k×m` if `trans_a`) and `b` as `k×n` (or `n×k` if `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Strides of the logical (rows×cols) view of a row-major buffer.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $erf:path, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
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
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserted buffer lengths cover every element
                // addressed by the given dimensions and strides.
                unsafe {
                    $gemm(
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, libm::erff, matrixmultiply::sgemm);
impl_real!(f64, libm::erf, matrixmultiply::dgemm);

/// True when every value is finite.
pub fn all_finite<T: Real>(values: &[T]) -> bool {
    values.iter().all(|v| v.is_finite())
}

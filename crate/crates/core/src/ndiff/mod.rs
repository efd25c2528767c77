//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes in reverse and fills the gradient slot of every parameter leaf.
//! Values are generic over [`Scalar`] so that gradient checks can run in
//! double precision while training runs in single precision.

mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamEntry, ParamSet};
pub use schedule::{one_cycle_lr, ScheduleConfig};
pub use tape::{BatchStats, BnMode, GumbelMode, Tape, Var};
pub(crate) use tape::focal_point;
pub use tensor::Tensor;

use core::fmt::Debug;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating point element type of a tensor.
pub trait Scalar:
    num_traits::Float
    + Default
    + Debug
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically
    /// `m×k` and `b` logically `k×n`. A transposed operand is stored
    /// row-major in its transposed shape.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
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
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_transposed);
                let (rsb, csb) = strides(k, n, b_transposed);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the length assertion above guarantees every index
                // addressed through these strides lies inside the slices.
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

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

pub mod gradcheck;

/// One Gumbel(0, 1) draw, `-ln(-ln u)` with `u` uniform on the open interval (0, 1).
pub fn gumbel_noise<R: rand::RngCore + ?Sized>(rng: &mut R) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    -libm::log(-libm::log(u))
}

//! Scalar abstraction so the whole pipeline runs in either f32 or f64.
//!
//! Training defaults to f32; the gradient-check suite re-runs the same code
//! paths in f64 against central finite differences.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point element type for tensors and every numeric kernel.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_usize(v: usize) -> Self {
        Self::of_f64(v as f64)
    }

    /// Draw from the standard normal distribution.
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Dense matrix multiply `c = a (m x k) * b (k x n) + beta * c`
    /// (row-major slices).
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// General strided matrix multiply into a row-major `c`; lets callers
    /// multiply by transposed views without materializing them.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn of_f64(v: f64) -> Self {
                v as $t
            }
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                StandardNormal.sample(rng)
            }
            fn gemm(m: usize, k: usize, n: usize, a: &[$t], b: &[$t], beta: $t, c: &mut [$t]) {
                assert_eq!(a.len(), m * k);
                assert_eq!(b.len(), k * n);
                Self::gemm_strided(m, k, n, a, k as isize, 1, b, n as isize, 1, beta, c);
            }

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                a: &[$t],
                rsa: isize,
                csa: isize,
                b: &[$t],
                rsb: isize,
                csb: isize,
                beta: $t,
                c: &mut [$t],
            ) {
                assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
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

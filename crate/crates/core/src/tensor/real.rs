use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Floating-point element type. `f32` is the training dtype, `f64` exists for
/// finite-difference verification.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn erf(self) -> Self;

    /// `c = a·b (+ c)` on row-major buffers. `a` is `m×k` (stored `k×m` when
    /// `trans_a`), `b` is `k×n` (stored `n×k` when `trans_b`), `c` is `m×n`.
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

    #[inline]
    fn cst(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical element (i, j) of a rows×cols operand
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! gemm_impl {
    ($ty:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            a: &[$ty],
            trans_a: bool,
            b: &[$ty],
            trans_b: bool,
            c: &mut [$ty],
            accumulate: bool,
        ) {
            assert!(a.len() >= m * k, "gemm: lhs buffer too small");
            assert!(b.len() >= k * n, "gemm: rhs buffer too small");
            assert!(c.len() >= m * n, "gemm: output buffer too small");
            if m == 0 || n == 0 {
                return;
            }
            let (rsa, csa) = strides(m, k, trans_a);
            let (rsb, csb) = strides(k, n, trans_b);
            let beta = if accumulate { 1.0 } else { 0.0 };
            // SAFETY: bounds asserted above; strides describe dense row-major
            // (or transposed) buffers of exactly those extents.
            unsafe {
                $kernel(
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
    };
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    gemm_impl!(f32, matrixmultiply::sgemm);
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    gemm_impl!(f64, matrixmultiply::dgemm);
}

//! Floating-point element type shared by every numeric component.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type of tensors, parameters and encoders.
///
/// Implemented for `f32` and `f64`. The provided `gemm` is a plain triple
/// loop; both float impls route to the blocked kernels of `matrixmultiply`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Short type name written into checkpoints.
    const NAME: &'static str;

    /// `c = a·b + beta·c` for row-major `a` (`m×k`, or `k×m` when
    /// `trans_a`) and `b` (`k×n`, or `n×k` when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        check_gemm_lengths(m, k, n, a.len(), b.len(), c.len());
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for p in 0..k {
                    let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                    let bv = if trans_b { b[j * k + p] } else { b[p * n + j] };
                    acc += av * bv;
                }
                let slot = &mut c[i * n + j];
                *slot = if beta == Self::zero() { acc } else { beta * *slot + acc };
            }
        }
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

fn check_gemm_lengths(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert_eq!(a, m * k, "gemm: lhs buffer length");
    assert_eq!(b, k * n, "gemm: rhs buffer length");
    assert_eq!(c, m * n, "gemm: output buffer length");
}

// (row, col) strides of a row-major buffer with `stored_cols` columns,
// optionally read as its transpose.
fn strides(stored_cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, stored_cols as isize)
    } else {
        (stored_cols as isize, 1)
    }
}

macro_rules! blas_scalar {
    ($ty:ty, $name:literal, $kernel:path) => {
        impl Scalar for $ty {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_lengths(m, k, n, a.len(), b.len(), c.len());
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c.iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                let (rsa, csa) = if trans_a { strides(m, true) } else { strides(k, false) };
                let (rsb, csb) = if trans_b { strides(k, true) } else { strides(n, false) };
                // SAFETY: buffer lengths checked above; strides describe
                // in-bounds row-major layouts of those buffers.
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
        }
    };
}

blas_scalar!(f32, "f32", matrixmultiply::sgemm);
blas_scalar!(f64, "f64", matrixmultiply::dgemm);

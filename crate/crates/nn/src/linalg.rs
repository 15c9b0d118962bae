//! Matrix products on row-major slices, backed by `matrixmultiply`.

use crate::par;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// Output rows handled per parallel task.
const ROW_BLOCK: usize = 64;

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`).
///
/// `op(a)` is `[m, k]`: `a` is stored as `[m, k]` for [`Trans::No`] and as
/// `[k, m]` for [`Trans::Yes`]. Likewise `op(b)` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };

    let block = |r0: usize, c_block: &mut [T]| {
        let rows = c_block.len() / n;
        // SAFETY: rows r0..r0+rows of op(a) lie inside `a` (checked lengths
        // above), `b` is read in full, and `c_block` is exactly rows*n long.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a.as_ptr().offset(r0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if par::ENABLED && m >= 2 * ROW_BLOCK && m * k * n >= 1 << 18 {
        par::for_each_chunk_mut(c, ROW_BLOCK * n, |i, chunk| block(i * ROW_BLOCK, chunk));
    } else {
        block(0, c);
    }
}

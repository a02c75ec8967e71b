//! Innermost matrix kernels.
//!
//! Everything accumulates into the destination (`c += ...`) so the same code
//! serves forward passes (zeroed destination) and gradient accumulation.
//! Loop orders are fixed and single-threaded: summation order never varies,
//! which keeps results bitwise reproducible, and the inner loops run over
//! contiguous rows so they autovectorize.

use super::Scalar;

/// `c[m,n] += a[m,k] @ b[k,n]`
pub fn mm_nn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (h, &aih) in arow.iter().enumerate() {
            let brow = &b[h * n..(h + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aih * brow[j];
            }
        }
    }
}

/// `c[m,n] += a[m,k] @ b[n,k]^T` (dot products of contiguous rows)
pub fn mm_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for h in 0..k {
                acc = acc + arow[h] * brow[h];
            }
            crow[j] = crow[j] + acc;
        }
    }
}

/// `c[k1,k2] += a[m,k1]^T @ b[m,k2]` (rank-one updates over rows of a and b)
pub fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k1: usize, k2: usize) {
    debug_assert_eq!(a.len(), m * k1);
    debug_assert_eq!(b.len(), m * k2);
    debug_assert_eq!(c.len(), k1 * k2);
    for i in 0..m {
        let arow = &a[i * k1..(i + 1) * k1];
        let brow = &b[i * k2..(i + 1) * k2];
        for (h, &aih) in arow.iter().enumerate() {
            let crow = &mut c[h * k2..(h + 1) * k2];
            for j in 0..k2 {
                crow[j] = crow[j] + aih * brow[j];
            }
        }
    }
}

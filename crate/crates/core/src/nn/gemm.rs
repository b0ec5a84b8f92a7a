//! Small row-major matrix kernels. Inner loops run over contiguous rows
//! with independent partial sums so the compiler can vectorize them; the
//! summation order is fixed, so results do not depend on the caller.

use crate::tensor::Real;

const LANES: usize = 8;

/// Dot product with eight interleaved partial sums.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let x = &a[c * LANES..(c + 1) * LANES];
        let y = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = tail;
    for v in acc {
        s += v;
    }
    s
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

/// `c (m x n) += a (m x k) * b (k x n)`.
pub(crate) fn gemm_nn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut q = 0;
        while q + 4 <= k {
            let (a0, a1, a2, a3) = (arow[q], arow[q + 1], arow[q + 2], arow[q + 3]);
            let b0 = &b[q * n..(q + 1) * n];
            let b1 = &b[(q + 1) * n..(q + 2) * n];
            let b2 = &b[(q + 2) * n..(q + 3) * n];
            let b3 = &b[(q + 3) * n..(q + 4) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            q += 4;
        }
        while q < k {
            axpy(arow[q], &b[q * n..(q + 1) * n], crow);
            q += 1;
        }
    }
}

/// `c (m x n) += a^T * b` where `a` is `k x m` and `b` is `k x n`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n);
    let mut q = 0;
    while q + 4 <= k {
        let b0 = &b[q * n..(q + 1) * n];
        let b1 = &b[(q + 1) * n..(q + 2) * n];
        let b2 = &b[(q + 2) * n..(q + 3) * n];
        let b3 = &b[(q + 3) * n..(q + 4) * n];
        for i in 0..m {
            let (a0, a1, a2, a3) = (a[q * m + i], a[(q + 1) * m + i], a[(q + 2) * m + i], a[(q + 3) * m + i]);
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        q += 4;
    }
    while q < k {
        let brow = &b[q * n..(q + 1) * n];
        for i in 0..m {
            axpy(a[q * m + i], brow, &mut c[i * n..(i + 1) * n]);
        }
        q += 1;
    }
}

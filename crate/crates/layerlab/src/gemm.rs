//! Thin matmul helpers on top of the `Element::gemm` kernels.
//!
//! The blocked kernels run single-threaded with a fixed reduction order, so
//! results are bitwise reproducible run to run. `matmul_naive` is the
//! reference used by tests.

use crate::tensor::Element;

/// c = a(m,k) . b(k,n), overwriting c.
pub fn matmul<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    E::gemm(m, k, n, a, false, b, false, E::zero(), c);
}

/// c = a(m,k) . b(k,n)^T  where b is stored (n,k), overwriting c.
pub fn matmul_bt<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    E::gemm(m, k, n, a, false, b, true, E::zero(), c);
}

/// c += a(m,k)^T-stored . b(k,n)  where a is stored (k,m).
pub fn matmul_at_acc<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    E::gemm(m, k, n, a, true, b, false, E::one(), c);
}

/// c += a(m,k) . b(k,n)^T  where b is stored (n,k).
pub fn matmul_bt_acc<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    E::gemm(m, k, n, a, false, b, true, E::one(), c);
}

/// Triple-loop reference: c = a(m,k) . b(k,n).
pub fn matmul_naive<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = E::zero();
            for p in 0..k {
                acc = acc + a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

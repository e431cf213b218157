//! Row-major matrix products with a fixed accumulation order.
//!
//! Every output element is accumulated as `c += a[p] * b[p]` for
//! `p = 0, 1, .., k-1`, independent of blocking, so results do not depend on
//! the host's SIMD width. No fused multiply-add is emitted.

use crate::Element;

const COL_BLOCK: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    kernel(m, n, k, |i, p| a[i * k + p], b, c);
}

/// `c[m×n] += aᵀ · b` where `a` is stored `[k×m]`.
pub fn gemm_tn<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    kernel(m, n, k, |i, p| a[p * m + i], b, c);
}

/// `c[m×n] += a · bᵀ` where `b` is stored `[n×k]`.
pub fn gemm_nt<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut bt = vec![T::ZERO; k * n];
    for j in 0..n {
        let row = &b[j * k..(j + 1) * k];
        for (p, &v) in row.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    gemm_nn(m, n, k, a, &bt, c);
}

#[inline(always)]
fn kernel<T: Element>(m: usize, n: usize, k: usize, a: impl Fn(usize, usize) -> T, b: &[T], c: &mut [T]) {
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (r0, rest) = c[i * n..].split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, rest) = rest.split_at_mut(n);
            let r3 = &mut rest[..n];
            let (c0, c1, c2, c3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j1];
                let (a0, a1, a2, a3) = (a(i, p), a(i + 1, p), a(i + 2, p), a(i + 3, p));
                for ((((x0, x1), x2), x3), &bv) in
                    c0.iter_mut().zip(c1.iter_mut()).zip(c2.iter_mut()).zip(c3.iter_mut()).zip(brow)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j1];
                let av = a(i, p);
                for (x, &bv) in crow.iter_mut().zip(brow) {
                    *x += av * bv;
                }
            }
            i += 1;
        }
        j0 = j1;
    }
}

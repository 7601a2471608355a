//! Matrix kernels shared by the conv and linear ops.
//!
//! Plain ikj loops, parallelized over output rows. Each output element is
//! accumulated sequentially in a fixed order, so results are identical run
//! to run regardless of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// `c[m,n] = a[m,k] * b[k,n]`
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != F::zero() {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in row.iter_mut().zip(b_row.iter()) {
                    *cv += av * bv;
                }
            }
        }
    });
    c
}

/// `c[m,n] = a[k,m]^T * b[k,n]`
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let av = a[kk * m + i];
            if av != F::zero() {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in row.iter_mut().zip(b_row.iter()) {
                    *cv += av * bv;
                }
            }
        }
    });
    c
}

/// `c[m,n] = a[m,k] * b[n,k]^T`
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![F::zero(); m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            *cv = acc;
        }
    });
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_matmul_agrees_with_naive() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_match_plain() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![1.0, -1.0, 0.5, 2.0, 0.0, 3.0]; // 3x2
        let plain = matmul(&a, &b, 2, 3, 2);

        // a stored transposed: at[k=3, m=2]
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), plain);

        // b stored transposed: bt[n=2, k=3]
        let bt = vec![1.0, 0.5, 0.0, -1.0, 2.0, 3.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), plain);
    }
}

//! Raw matrix kernels over row-major f32 slices.
//!
//! Reduction order is fixed in every kernel, so results are bit-identical
//! across runs regardless of optimization level.

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row.iter()) {
                *cj += av * bj;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (rows of `b` are the columns of the product)
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cj) in c_row.iter_mut().enumerate() {
            *cj += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row.iter()) {
                *cj += av * bj;
            }
        }
    }
}

/// Dot product with four fixed-order accumulator lanes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0f32;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += f64::from(a[i * k + p]) * f64::from(b[p * n + j]);
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    fn fill(len: usize, seed: u64) -> Vec<f32> {
        let mut r = crate::rng::RngStream::named(seed, "kernels");
        (0..len).map(|_| r.uniform(-1.0, 1.0) as f32).collect()
    }

    #[test]
    fn nn_matches_naive() {
        let (m, k, n) = (3, 5, 4);
        let a = fill(m * k, 1);
        let b = fill(k * n, 2);
        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, m, k, n, &mut c);
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn nt_matches_nn_with_transpose() {
        let (m, k, n) = (4, 7, 3);
        let a = fill(m * k, 3);
        let bt = fill(n * k, 4); // [n,k]
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                b[p * n + j] = bt[j * k + p];
            }
        }
        let mut c1 = vec![0.0; m * n];
        matmul_nt(&a, &bt, m, k, n, &mut c1);
        let mut c2 = vec![0.0; m * n];
        matmul_nn(&a, &b, m, k, n, &mut c2);
        for (x, y) in c1.iter().zip(c2.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn tn_matches_nn_with_transpose() {
        let (m, k, n) = (5, 3, 4);
        let at = fill(m * k, 5); // [m,k], logical op is at^T * b
        let b = fill(m * n, 6);
        let mut a = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                a[p * m + i] = at[i * k + p];
            }
        }
        let mut c1 = vec![0.0; k * n];
        matmul_tn(&at, &b, m, k, n, &mut c1);
        let mut c2 = vec![0.0; k * n];
        matmul_nn(&a, &b, k, m, n, &mut c2);
        for (x, y) in c1.iter().zip(c2.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

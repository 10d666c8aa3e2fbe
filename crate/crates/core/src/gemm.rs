//! Single-threaded dense matrix kernels used by conv (via im2col), the fully
//! connected layers and the correlation matrices.
//!
//! Layouts are row-major. All kernels accumulate into `c`, so callers pass a
//! zeroed buffer for a plain product. Loop order is fixed, which makes every
//! result bit-reproducible for a given build.

use crate::scalar::Scalar;

/// c[m,n] += a[m,k] * b[k,n]
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let crow = &mut c[i * n..][..n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..][..n];
            let b1 = &b[(p + 1) * n..][..n];
            let b2 = &b[(p + 2) * n..][..n];
            let b3 = &b[(p + 3) * n..][..n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let ap = arow[p];
            let brow = &b[p * n..][..n];
            for j in 0..n {
                crow[j] += ap * brow[j];
            }
            p += 1;
        }
    }
}

/// c[m,n] += transpose(a) * b, with a stored as [k,m] and b as [k,n].
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut p = 0;
    while p + 4 <= k {
        let a0 = &a[p * m..][..m];
        let a1 = &a[(p + 1) * m..][..m];
        let a2 = &a[(p + 2) * m..][..m];
        let a3 = &a[(p + 3) * m..][..m];
        let b0 = &b[p * n..][..n];
        let b1 = &b[(p + 1) * n..][..n];
        let b2 = &b[(p + 2) * n..][..n];
        let b3 = &b[(p + 3) * n..][..n];
        for i in 0..m {
            let crow = &mut c[i * n..][..n];
            let (x0, x1, x2, x3) = (a0[i], a1[i], a2[i], a3[i]);
            for j in 0..n {
                crow[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
            }
        }
        p += 4;
    }
    while p < k {
        let ap = &a[p * m..][..m];
        let bp = &b[p * n..][..n];
        for i in 0..m {
            let x = ap[i];
            let crow = &mut c[i * n..][..n];
            for j in 0..n {
                crow[j] += x * bp[j];
            }
        }
        p += 1;
    }
}

/// c[m,n] += a[m,k] * transpose(b), with b stored as [n,k].
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let crow = &mut c[i * n..][..n];
        for j in 0..n {
            let brow = &b[j * k..][..k];
            crow[j] += dot(arow, brow);
        }
    }
}

/// Lane-accumulated dot product: vectorizes without reassociating the naive
/// left-to-right sum, and is deterministic for a given build.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len());
    const LANES: usize = 16;
    let mut acc = [S::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = S::zero();
    for v in acc {
        s += v;
    }
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// out[j,i] = a[i,j] for a stored as [rows, cols].
pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize, out: &mut [S]) {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        let arow = &a[i * cols..][..cols];
        for j in 0..cols {
            out[j * rows + i] = arow[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn kernels_match_naive_loops() {
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 7), (16, 33, 9), (20, 64, 17)] {
            let a = rand_vec(m * k, 1 + (m * k) as u64);
            let b = rand_vec(k * n, 2 + (k * n) as u64);
            let want = naive(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            gemm_nn(&a, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "gemm_nn mismatch");
            }

            let mut at = vec![0.0; m * k];
            transpose(&a, m, k, &mut at);
            let mut c = vec![0.0; m * n];
            gemm_tn(&at, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "gemm_tn mismatch");
            }

            let mut bt = vec![0.0; k * n];
            transpose(&b, k, n, &mut bt);
            let mut c = vec![0.0; m * n];
            gemm_nt(&a, &bt, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "gemm_nt mismatch");
            }
        }
    }

    #[test]
    fn accumulation_is_additive() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![1.0f64, 0.0, 0.0, 1.0];
        let mut c = vec![10.0f64; 4];
        gemm_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, vec![11.0, 12.0, 13.0, 14.0]);
    }

    // cargo test -p fewshot-core --release -- bench_gemm --ignored --nocapture
    #[test]
    #[ignore]
    fn bench_gemm() {
        use std::time::Instant;
        fn run<S: Scalar>(name: &str, m: usize, k: usize, n: usize, reps: usize) {
            let a = vec![S::from_f64(0.5); m * k];
            let b = vec![S::from_f64(0.25); k * n];
            let mut c = vec![S::zero(); m * n];
            let t0 = Instant::now();
            for _ in 0..reps {
                gemm_nn(&a, &b, &mut c, m, k, n);
            }
            let dt = t0.elapsed().as_secs_f64();
            let gflops = (2.0 * (m * k * n * reps) as f64) / dt / 1e9;
            println!("{name} nn {m}x{k}x{n}: {gflops:.2} GFLOP/s");
        }
        // conv-shaped problems: positions x patch  times  patch x channels
        run::<f32>("f32", 17100, 1152, 64, 8);
        run::<f32>("f32", 2880, 576, 64, 32);
        run::<f64>("f64", 17100, 1152, 64, 4);
        run::<f64>("f64", 2880, 576, 64, 16);

        fn run_tn<S: Scalar>(name: &str, m: usize, k: usize, n: usize, reps: usize) {
            let a = vec![S::from_f64(0.5); k * m];
            let b = vec![S::from_f64(0.25); k * n];
            let mut c = vec![S::zero(); m * n];
            let t0 = Instant::now();
            for _ in 0..reps {
                gemm_tn(&a, &b, &mut c, m, k, n);
            }
            let dt = t0.elapsed().as_secs_f64();
            let gflops = (2.0 * (m * k * n * reps) as f64) / dt / 1e9;
            println!("{name} tn {m}x{k}x{n}: {gflops:.2} GFLOP/s");
        }
        run_tn::<f32>("f32", 1152, 17100, 64, 8);
        run_tn::<f64>("f64", 1152, 17100, 64, 4);
    }
}

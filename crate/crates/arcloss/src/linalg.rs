//! Flat-slice matrix kernels used by the conv/dense layers.
//!
//! All kernels are bitwise deterministic regardless of thread count: rayon
//! splits work over disjoint output rows and every output element is reduced
//! by a single thread in a fixed k-order.

use rayon::prelude::*;

const ROW_BLOCK: usize = 64;

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f64; m * n];
    if m * k * n == 0 {
        return c;
    }
    c.par_chunks_mut(n * ROW_BLOCK).enumerate().for_each(|(blk, chunk)| {
        mm_block(a, b, k, n, blk * ROW_BLOCK, chunk);
    });
    c
}

// Rows [i0, i0 + chunk.len()/n) of the product, 4 rows at a time so each
// B row load feeds 4 accumulator rows.
fn mm_block(a: &[f64], b: &[f64], k: usize, n: usize, i0: usize, chunk: &mut [f64]) {
    let rows = chunk.len() / n;
    let mut i = 0;
    while i + 4 <= rows {
        let a0 = &a[(i0 + i) * k..(i0 + i + 1) * k];
        let a1 = &a[(i0 + i + 1) * k..(i0 + i + 2) * k];
        let a2 = &a[(i0 + i + 2) * k..(i0 + i + 3) * k];
        let a3 = &a[(i0 + i + 3) * k..(i0 + i + 4) * k];
        let (r0, rest) = chunk[i * n..(i + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for kk in 0..k {
            let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            let brow = &b[kk * n..kk * n + n];
            for j in 0..n {
                let bv = brow[j];
                r0[j] += x0 * bv;
                r1[j] += x1 * bv;
                r2[j] += x2 * bv;
                r3[j] += x3 * bv;
            }
        }
        i += 4;
    }
    while i < rows {
        let arow = &a[(i0 + i) * k..(i0 + i + 1) * k];
        let crow = &mut chunk[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
        i += 1;
    }
}

/// C[m,n] = A^T * B where A is [k,m], B is [k,n]. Avoids materializing the
/// transpose of a large A (used for weight gradients).
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f64; m * n];
    if m * k * n == 0 {
        return c;
    }
    c.par_chunks_mut(n * 4).enumerate().for_each(|(blk, chunk)| {
        let i0 = blk * 4;
        let rows = chunk.len() / n;
        if rows == 4 {
            let (r0, rest) = chunk.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            for kk in 0..k {
                let arow = &a[kk * m + i0..kk * m + i0 + 4];
                let brow = &b[kk * n..kk * n + n];
                let (x0, x1, x2, x3) = (arow[0], arow[1], arow[2], arow[3]);
                for j in 0..n {
                    let bv = brow[j];
                    r0[j] += x0 * bv;
                    r1[j] += x1 * bv;
                    r2[j] += x2 * bv;
                    r3[j] += x3 * bv;
                }
            }
        } else {
            for kk in 0..k {
                let brow = &b[kk * n..kk * n + n];
                for (ii, crow) in chunk.chunks_mut(n).enumerate() {
                    let x = a[kk * m + i0 + ii];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += x * bv;
                    }
                }
            }
        }
    });
    c
}

/// C[m,n] = A * B^T where A is [m,t], B is [n,t]; plain row-dot form.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, t: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * t);
    debug_assert_eq!(b.len(), n * t);
    let mut c = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a[i * t..(i + 1) * t];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * t..(j + 1) * t];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cv = s;
        }
    }
    c
}

/// Serial variant of [`matmul`] for callers that already parallelize at a
/// coarser grain (e.g. per image).
pub fn matmul_serial(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; m * n];
    if m * k * n > 0 {
        mm_block(a, b, k, n, 0, &mut c);
    }
    c
}

/// B[n,m] = A[m,n]^T.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (7, 4, 9), (13, 17, 11), (130, 9, 33)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = matmul(&a, &b, m, k, n);
            let want = naive(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "({m},{k},{n}): {g} vs {w}");
            }
        }
    }

    #[test]
    fn matmul_tn_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for &(k, m, n) in &[(1, 1, 1), (5, 3, 2), (19, 7, 6), (64, 13, 29)] {
            let a: Vec<f64> = (0..k * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = matmul_tn(&a, &b, k, m, n);
            let at = transpose(&a, k, m);
            let want = naive(&at, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "({k},{m},{n}): {g} vs {w}");
            }
        }
    }

    #[test]
    fn matmul_nt_and_serial_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for &(m, n, t) in &[(1, 1, 1), (4, 6, 5), (9, 3, 17)] {
            let a: Vec<f64> = (0..m * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = matmul_nt(&a, &b, m, n, t);
            let bt = transpose(&b, n, t);
            let want = naive(&a, &bt, m, t, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
            let s = matmul_serial(&a, &bt, m, t, n);
            assert_eq!(s, matmul(&a, &bt, m, t, n));
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let a: Vec<f64> = (0..6 * 11).map(|_| rng.gen::<f64>()).collect();
        let t = transpose(&a, 6, 11);
        let back = transpose(&t, 11, 6);
        assert_eq!(a, back);
    }
}

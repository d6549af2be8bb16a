//! Plain loops the graph ops are built from. Loop orders are fixed so results
//! are bit-reproducible.

use super::Real;

/// `c[n×m] += a[n×k] · b[k×m]`, all row-major.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    if m == 0 || k == 0 {
        return;
    }
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(m)).take(n) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(m)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `out[c×r] = src[r×c]ᵀ`.
pub(crate) fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `c[k×m] += a[n×k]ᵀ · b[n×m]`.
pub(crate) fn gemm_at_b_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    if m == 0 || k == 0 {
        return;
    }
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(m)).take(n) {
        for (&av, crow) in arow.iter().zip(c.chunks_exact_mut(m)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[n×k] += a[n×m] · b[k×m]ᵀ`.
pub(crate) fn gemm_a_bt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    let bt = transpose(b, k, m);
    gemm_acc(a, &bt, c, n, m, k);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                c[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (n, k, m) = (3, 4, 5);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(&a, &b, n, k, m);

        let mut c = vec![0.0; n * m];
        gemm_acc(&a, &b, &mut c, n, k, m);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ·c via gemm_at_b against naive on the transposed a
        let at = transpose(&a, n, k);
        let mut g = vec![0.0; k * m];
        gemm_at_b_acc(&a, &expect, &mut g, n, k, m);
        let want = naive(&at, &expect, k, n, m);
        for (x, y) in g.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, k, m);
        let mut h = vec![0.0; n * k];
        gemm_a_bt_acc(&expect, &b, &mut h, n, k, m);
        let want = naive(&expect, &bt, n, m, k);
        for (x, y) in h.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

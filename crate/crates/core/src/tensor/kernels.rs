//! Raw numeric kernels shared by graph forward and backward passes.
//!
//! All kernels accumulate into their output (`c += ...`) so backward passes
//! can reuse them for additive gradient flow. Loops are structured so the
//! innermost dimension is contiguous and bounds checks vanish.

use super::Element;

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&a_ik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (c_ij, &b_kj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_ik * b_kj;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
pub fn matmul_nt_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (c_ij, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            let mut acc = E::ZERO;
            for (&a_ik, &b_jk) in a_row.iter().zip(b_row) {
                acc = acc + a_ik * b_jk;
            }
            *c_ij = *c_ij + acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&a_ik, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (c_kj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_kj = *c_kj + a_ik * b_ij;
            }
        }
    }
}

/// y += coef * x
pub fn axpy<E: Element>(y: &mut [E], x: &[E], coef: E) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + coef * xi;
    }
}

/// Standard normal CDF, used by the exact-erf GELU.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// gelu(x) = x * Phi(x) with the exact Gaussian CDF.
pub fn gelu_f64(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// d/dx gelu(x) = Phi(x) + x * phi(x)
pub fn gelu_grad_f64(x: f64) -> f64 {
    norm_cdf(x) + x * norm_pdf(x)
}

/// Rowwise softmax with max subtraction; `last` is the row length.
pub fn softmax_rows<E: Element>(out: &mut [E], x: &[E], last: usize) {
    debug_assert_eq!(out.len(), x.len());
    for (o_row, x_row) in out.chunks_exact_mut(last).zip(x.chunks_exact(last)) {
        let mut max = x_row[0];
        for &v in &x_row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = E::ZERO;
        for (o, &v) in o_row.iter_mut().zip(x_row) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = E::ONE / sum;
        for o in o_row.iter_mut() {
            *o = *o * inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        // [1,1] x [[1,2],[3,4]] = [4,6]
        let mut c = vec![0.0f64; 2];
        matmul_acc(&mut c, &[1.0, 1.0], &[1.0, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(c, vec![4.0, 6.0]);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        // b^T is 2x3; a * (b^T)^T == a * b
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c1 = vec![0.0; 4];
        let mut c2 = vec![0.0; 4];
        matmul_acc(&mut c1, &a, &b, 2, 3, 2);
        matmul_nt_acc(&mut c2, &a, &bt, 2, 3, 2);
        assert_eq!(c1, c2);
        // a^T (3x2) * a (2x3) via tn
        let mut c3 = vec![0.0; 9];
        matmul_tn_acc(&mut c3, &a, &a, 2, 3, 3);
        let mut c4 = vec![0.0; 9];
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        matmul_acc(&mut c4, &at, &a, 3, 2, 3);
        assert_eq!(c3, c4);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_f64(0.0), 0.0);
        assert!((gelu_f64(10.0) - 10.0).abs() < 1e-6);
        // 1 * Phi(1), Phi(1) = 0.841344746...
        assert!((gelu_f64(1.0) - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn softmax_stability_and_normalization() {
        let mut out = vec![0.0f64; 2];
        softmax_rows(&mut out, &[1000.0, 0.0], 2);
        assert!(out[0] > 1.0 - 1e-12 && out[1] < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));

        let mut u = vec![0.0f64; 4];
        softmax_rows(&mut u, &[3.0; 4], 4);
        for v in &u {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let mut w = vec![0.0f64; 2];
        softmax_rows(&mut w, &[std::f64::consts::LN_2, 0.0], 2);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
    }
}

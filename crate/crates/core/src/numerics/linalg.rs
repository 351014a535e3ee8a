//! Small dense helpers for `n x n` row-major matrices. Dimensions here are the
//! residual dimension, so nothing needs to be blocked or vectorised.

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky(a, n)?;
    // Invert L by forward substitution, then A^-1 = L^-T L^-1.
    let mut linv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                sum -= l[i * n + k] * linv[k * n + col];
            }
            linv[i * n + col] = sum / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = 0.0;
            for k in i.max(j)..n {
                sum += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = sum;
            inv[j * n + i] = sum;
        }
    }
    Some(inv)
}

/// `L L^T` for a row-major lower-triangular `L`.
pub fn lower_gram(l: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = 0.0;
            for k in 0..=j {
                sum += l[i * n + k] * l[j * n + k];
            }
            out[i * n + j] = sum;
            out[j * n + i] = sum;
        }
    }
    out
}

/// Number of packed entries of an `n x n` lower triangle.
pub fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Packed index of `(i, j)` with `j <= i`, rows first.
pub fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

pub fn unpack_lower(packed: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            l[i * n + j] = packed[tri_index(i, j)];
        }
    }
    l
}

pub fn pack_lower(l: &[f64], n: usize) -> Vec<f64> {
    let mut packed = vec![0.0; tri_len(n)];
    for i in 0..n {
        for j in 0..=i {
            packed[tri_index(i, j)] = l[i * n + j];
        }
    }
    packed
}

/// Adds `1e-9 * trace / n` to the diagonal; returns whether the result
/// factorises.
pub fn regularize(a: &mut [f64], n: usize) -> bool {
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let bump = 1e-9 * (trace / n as f64).abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        a[i * n + i] += bump;
    }
    cholesky(a, n).is_some()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_roundtrip() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        let back = lower_gram(&l, 3);
        for (x, y) in a.iter().zip(&back) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let inv = spd_inverse(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn not_positive_definite() {
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn packing() {
        let packed = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let l = unpack_lower(&packed, 3);
        assert_eq!(l, vec![1.0, 0.0, 0.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0]);
        assert_eq!(pack_lower(&l, 3), packed.to_vec());
    }
}

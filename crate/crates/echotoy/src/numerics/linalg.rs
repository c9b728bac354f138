//! Small dense `f64` routines for covariance-based metrics.
//!
//! Matrices are row-major `Vec<f64>` with an explicit dimension argument;
//! everything here operates on symmetric matrices of modest size (latent and
//! embedding dimensions, <= a few hundred), so simple O(n^3) algorithms are
//! plenty.

use crate::error::{Error, Result};

/// Sample mean and unbiased covariance of row vectors.
pub fn mean_covariance(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::contract("mean_covariance", "need at least 2 samples"));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::contract("mean_covariance", "ragged or empty sample vectors"));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (s[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    Ok((mean, cov))
}

pub fn trace(n: usize, a: &[f64]) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}

/// Add `eps * I` in place.
pub fn add_ridge(n: usize, a: &mut [f64], eps: f64) {
    for i in 0..n {
        a[i * n + i] += eps;
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Fails with a numeric error if a pivot is not strictly positive.
pub fn cholesky(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "cholesky: non-positive pivot {sum:.3e} at index {i}"
                    )));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// `ln det A` from its Cholesky factor, plus the smallest pivot (useful for
/// conditioning diagnostics).
pub fn logdet_from_cholesky(n: usize, l: &[f64]) -> (f64, f64) {
    let mut logdet = 0.0;
    let mut min_pivot = f64::INFINITY;
    for i in 0..n {
        let p = l[i * n + i];
        logdet += 2.0 * p.ln();
        min_pivot = min_pivot.min(p);
    }
    (logdet, min_pivot)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors) with `a = V diag(vals) V^T`; column
/// `j` of `V` (i.e. `vecs[i*n + j]` over `i`) is the eigenvector for
/// `vals[j]`.
pub fn sym_eigen(n: usize, a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::contract("sym_eigen", "matrix size mismatch"));
    }
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * norm.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // rotate rows/columns p and q of a
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                a[p * n + p] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
                a[q * n + q] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a[i * n + p];
                        let aiq = a[i * n + q];
                        a[i * n + p] = c * aip - s * aiq;
                        a[p * n + i] = a[i * n + p];
                        a[i * n + q] = s * aip + c * aiq;
                        a[q * n + i] = a[i * n + q];
                    }
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i * n + i]).collect();
    Ok((vals, v))
}

/// Symmetric PSD square root via eigendecomposition; small negative
/// eigenvalues from roundoff are clamped to zero.
pub fn sqrtm_psd(n: usize, a: &[f64]) -> Result<Vec<f64>> {
    let (vals, vecs) = sym_eigen(n, a)?;
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // V diag(roots) V^T
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vecs[i * n + k] * roots[k] * vecs[j * n + k];
            }
            out[i * n + j] = acc;
            out[j * n + i] = acc;
        }
    }
    Ok(out)
}

pub fn matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn cholesky_of_known_matrix() {
        // [[4,2],[2,3]] = L L^T with L = [[2,0],[1,sqrt(2)]]
        let l = cholesky(2, &[4.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-12);
        assert!((l[2] - 1.0).abs() < 1e-12);
        assert!((l[3] - 2.0f64.sqrt()).abs() < 1e-12);
        let (logdet, _) = logdet_from_cholesky(2, &l);
        assert!((logdet - (4.0f64 * 3.0 - 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(cholesky(2, &[1.0, 2.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn eigen_recovers_diagonal() {
        let (mut vals, _) = sym_eigen(3, &[3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((vals[0] - 1.0).abs() < 1e-10);
        assert!((vals[1] - 2.0).abs() < 1e-10);
        assert!((vals[2] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let mut rng = crate::rng::stream(1, 2, 3);
        let n = 6;
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.random_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let (vals, vecs) = sym_eigen(n, &a).unwrap();
        // rebuild and compare
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += vecs[i * n + k] * vals[k] * vecs[j * n + k];
                }
                assert!((acc - a[i * n + j]).abs() < 1e-8, "({i},{j}): {acc} vs {}", a[i * n + j]);
            }
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        let mut rng = crate::rng::stream(4, 5, 6);
        let n = 5;
        // PSD matrix R R^T
        let r: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    a[i * n + j] += r[i * n + k] * r[j * n + k];
                }
            }
        }
        let s = sqrtm_psd(n, &a).unwrap();
        let ss = matmul_f64(&s, &s, n, n, n);
        for i in 0..n * n {
            assert!((ss[i] - a[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn covariance_of_independent_axes() {
        // x axis constant 1..n spread, y uncorrelated sign flips
        let samples: Vec<Vec<f64>> = (0..100)
            .map(|i| vec![i as f64, if i % 2 == 0 { 1.0 } else { -1.0 }])
            .collect();
        let (mean, cov) = mean_covariance(&samples).unwrap();
        assert!((mean[0] - 49.5).abs() < 1e-9);
        assert!(mean[1].abs() < 1e-9);
        // off-diagonal should be tiny relative to variances
        assert!(cov[1].abs() < 1.0);
        assert!(cov[0] > 100.0);
    }
}

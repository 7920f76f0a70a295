//! Small dense and banded linear-algebra helpers.

use crate::error::{invalid, Result};
use nalgebra::DMatrix;

/// Row-major square matrix to `DMatrix`.
pub fn to_dmatrix(n: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, data)
}

/// `exp(tau * q)` for a square row-major matrix (scaling and squaring, Padé).
pub fn expm_scaled(n: usize, q: &[f64], tau: f64) -> DMatrix<f64> {
    let m = to_dmatrix(n, q) * tau;
    m.exp()
}

/// Row vector times matrix: `out_j = sum_i v_i m_ij`.
pub fn row_times(v: &[f64], m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.ncols();
    let mut out = vec![0.0; n];
    for (i, vi) in v.iter().enumerate() {
        if *vi == 0.0 {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += vi * m[(i, j)];
        }
    }
    out
}

/// Matrix times column vector.
pub fn times_col(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let n = m.nrows();
    (0..n)
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

/// Solves a tridiagonal system with sub-diagonal `a`, diagonal `b`, super-diagonal `c`.
///
/// `a[0]` and `c[n-1]` are ignored.
pub fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n || c.len() != n || rhs.len() != n {
        return invalid("tridiagonal: length mismatch");
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut denom = b[0];
    if denom == 0.0 {
        return invalid("tridiagonal: zero pivot");
    }
    cp[0] = c[0] / denom;
    dp[0] = rhs[0] / denom;
    for i in 1..n {
        denom = b[i] - a[i] * cp[i - 1];
        if denom == 0.0 {
            return invalid("tridiagonal: zero pivot");
        }
        cp[i] = c[i] / denom;
        dp[i] = (rhs[i] - a[i] * dp[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    Ok(x)
}

/// Gauss–Hermite rule for the standard normal weight, via Golub–Welsch.
///
/// Returns nodes `z_k` and weights `w_k` with `sum w_k f(z_k) ≈ E f(Z)`.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Probabilists' Hermite recurrence: Jacobi matrix has off-diagonal sqrt(k).
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let v = (k as f64).sqrt();
        j[(k - 1, k)] = v;
        j[(k, k - 1)] = v;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

/// Checks that a symmetric matrix is positive semidefinite (tolerance relative to its scale).
pub fn is_psd(n: usize, data: &[f64]) -> bool {
    let m = to_dmatrix(n, data);
    let asym = (&m - m.transpose()).amax();
    let scale = m.amax().max(1e-300);
    if asym > 1e-12 * scale {
        return false;
    }
    let eig = m.symmetric_eigen();
    eig.eigenvalues.iter().all(|&l| l >= -1e-12 * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_state_exponential_closed_form() {
        let q = [-1.0, 1.0, 0.0, 0.0];
        let p = expm_scaled(2, &q, 1.0);
        let e = (-1.0f64).exp();
        assert!((p[(0, 0)] - e).abs() < 1e-14);
        assert!((p[(0, 1)] - (1.0 - e)).abs() < 1e-14);
        assert_eq!(p[(1, 0)], 0.0);
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let a = [0.0, -1.0, -1.0, -1.0];
        let b = [4.0, 4.0, 4.0, 4.0];
        let c = [-1.0, -1.0, -1.0, 0.0];
        let x_true = [1.0, -2.0, 0.5, 3.0];
        let rhs: Vec<f64> = (0..4)
            .map(|i| {
                let mut s = b[i] * x_true[i];
                if i > 0 {
                    s += a[i] * x_true[i - 1];
                }
                if i < 3 {
                    s += c[i] * x_true[i + 1];
                }
                s
            })
            .collect();
        let x = solve_tridiagonal(&a, &b, &c, &rhs).unwrap();
        for i in 0..4 {
            assert!((x[i] - x_true[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn gauss_hermite_moments() {
        let (z, w) = gauss_hermite_normal(20);
        let m2: f64 = z.iter().zip(&w).map(|(z, w)| w * z * z).sum();
        let m4: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(4)).sum();
        assert!((m2 - 1.0).abs() < 1e-12);
        assert!((m4 - 3.0).abs() < 1e-11);
    }

    #[test]
    fn psd_detection() {
        assert!(is_psd(2, &[2.0, 1.0, 1.0, 2.0]));
        assert!(!is_psd(2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(!is_psd(2, &[1.0, 0.5, 0.0, 1.0]));
    }
}

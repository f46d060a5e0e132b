//! Gaussian kernel with a full bandwidth matrix.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Symmetric positive-definite bandwidth matrix `H` with cached inverse,
/// inverse square root and determinant.
#[derive(Debug, Clone)]
pub struct BandwidthMatrix {
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
    det: f64,
    // (2 pi)^{-d/2} |H|^{-1/2}
    norm: f64,
}

impl BandwidthMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let d = matrix.nrows();
        if d == 0 || matrix.ncols() != d {
            return Err(Error::input(format!(
                "bandwidth matrix must be square and nonempty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("bandwidth matrix has non-finite entries"));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::input(format!("bandwidth matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        let eig = matrix.clone().symmetric_eigen();
        if let Some(ev) = eig.eigenvalues.iter().find(|ev| !(**ev > 0.0)) {
            return Err(Error::input(format!("bandwidth matrix is not positive definite (eigenvalue {ev})")));
        }
        let det: f64 = eig.eigenvalues.iter().product();
        let q = &eig.eigenvectors;
        let inv_sqrt_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
        let inv_sqrt = q * inv_sqrt_diag * q.transpose();
        let inverse = q * inv_diag * q.transpose();
        let norm = (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0) / det.sqrt();
        Ok(Self {
            matrix,
            inverse,
            inv_sqrt,
            det,
            norm,
        })
    }

    /// Builds `H` from `d*d` row-major entries.
    pub fn from_row_major(d: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != d * d {
            return Err(Error::input(format!(
                "expected {} bandwidth entries for d = {d}, got {}",
                d * d,
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(d, d, entries))
    }

    /// Normal-reference full-matrix rule:
    /// `H = (4/(d+2))^{2/(d+4)} n^{-2/(d+4)} * Sigma`, with `Sigma` the sample
    /// covariance (divisor `n - 1`).
    pub fn normal_reference(data: ArrayView2<f64>) -> Result<Self> {
        let (n, d) = data.dim();
        if n < d + 2 {
            return Err(Error::input(format!("normal-reference rule needs n >= d + 2, got n = {n}, d = {d}")));
        }
        let mut cov = sample_covariance(data);
        let eig_min = cov.clone().symmetric_eigen().eigenvalues.min();
        let trace = cov.trace();
        if !(eig_min > 1e-12 * trace.abs().max(f64::MIN_POSITIVE)) {
            let ridge = 1e-9 * trace.max(f64::MIN_POSITIVE) / d as f64;
            log::warn!("sample covariance is (near) singular; adding ridge {ridge:e}");
            for k in 0..d {
                cov[(k, k)] += ridge.max(1e-300);
            }
        }
        let df = d as f64;
        let factor = (4.0 / (df + 2.0)).powf(2.0 / (df + 4.0)) * (n as f64).powf(-2.0 / (df + 4.0));
        Self::new(cov * factor)
    }

    pub fn dims(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    /// Row-major entries of `H`.
    pub fn to_row_major(&self) -> Vec<f64> {
        let d = self.dims();
        (0..d * d).map(|i| self.matrix[(i / d, i % d)]).collect()
    }

    /// Marginal standard deviation of the kernel along axis `k`.
    pub fn axis_sd(&self, k: usize) -> f64 {
        self.matrix[(k, k)].sqrt()
    }

    /// `u' H^{-1} u`.
    pub fn mahalanobis_sq(&self, u: &[f64]) -> f64 {
        let d = self.dims();
        let mut acc = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += self.inverse[(i, j)] * u[j];
            }
            acc += u[i] * row;
        }
        acc
    }

    /// `K_H(u) = |H|^{-1/2} K(H^{-1/2} u)` with `K` the standard normal density.
    pub fn kernel_at(&self, u: &[f64]) -> f64 {
        self.norm * (-0.5 * self.mahalanobis_sq(u)).exp()
    }

    /// Same as [`kernel_at`](Self::kernel_at), evaluated through `H^{-1/2}`.
    pub fn kernel_at_whitened(&self, u: &[f64]) -> f64 {
        let z = &self.inv_sqrt * DVector::from_column_slice(u);
        self.norm * (-0.5 * z.norm_squared()).exp()
    }
}

fn sample_covariance(data: ArrayView2<f64>) -> DMatrix<f64> {
    let (n, d) = data.dim();
    let means: Vec<f64> = data.columns().into_iter().map(|c| c.sum() / n as f64).collect();
    let mut cov = DMatrix::zeros(d, d);
    for row in data.rows() {
        for i in 0..d {
            let di = row[i] - means[i];
            for j in 0..=i {
                cov[(i, j)] += di * (row[j] - means[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn value_at_origin() {
        let h = BandwidthMatrix::from_row_major(2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((h.kernel_at(&[0.0, 0.0]) - 1.0 / (2.0 * PI)).abs() < 1e-15);
        let h4 = BandwidthMatrix::from_row_major(2, &[4.0, 0.0, 0.0, 4.0]).unwrap();
        assert!((h4.kernel_at(&[0.0, 0.0]) - 0.25 / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn symmetric_and_consistent() {
        let h = BandwidthMatrix::from_row_major(2, &[0.5, 0.2, 0.2, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let u = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let neg = [-u[0], -u[1]];
            assert_eq!(h.kernel_at(&u), h.kernel_at(&neg));
            let a = h.kernel_at(&u);
            assert!((a - h.kernel_at_whitened(&u)).abs() <= 1e-12 * a.max(1e-300));
            assert!(a > 0.0);
        }
    }

    #[test]
    fn rejects_invalid_matrices() {
        assert!(BandwidthMatrix::from_row_major(2, &[1.0, 0.5, 0.4, 1.0]).is_err());
        assert!(BandwidthMatrix::from_row_major(2, &[1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(BandwidthMatrix::from_row_major(2, &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn normal_reference_identity_covariance() {
        // Construct data with sample covariance exactly I: rows of a scaled
        // orthogonal design.
        let n = 900;
        let mut data = Array2::zeros((n, 2));
        for i in 0..n {
            let t = 2.0 * PI * i as f64 / n as f64;
            data[[i, 0]] = t.cos();
            data[[i, 1]] = t.sin();
        }
        // cos/sin over a full period: mean 0, covariance diag(n/2/(n-1))
        let s = (2.0 * (n - 1) as f64 / n as f64).sqrt();
        data.mapv_inplace(|v| v * s);
        let h = BandwidthMatrix::normal_reference(data.view()).unwrap();
        // (4/(d+2))^{2/(d+4)} = 1 for d = 2
        let expected = (900f64).powf(-1.0 / 3.0);
        assert!((expected - 0.1036).abs() < 1e-4);
        let m = h.matrix();
        assert!((m[(0, 0)] - expected).abs() < 1e-12, "{} vs {expected}", m[(0, 0)]);
        assert!((m[(1, 1)] - expected).abs() < 1e-12);
        assert!(m[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn normal_reference_scaling_and_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200;
        let mut data = Array2::zeros((n, 2));
        for i in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            data[[i, 0]] = a;
            data[[i, 1]] = 0.8 * a + 0.3 * b;
        }
        let h = BandwidthMatrix::normal_reference(data.view()).unwrap();
        assert!(h.matrix()[(0, 1)] > 0.0);
        let eig = h.matrix().clone().symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|&e| e > 0.0));

        let scaled = data.mapv(|v| 3.0 * v);
        let h3 = BandwidthMatrix::normal_reference(scaled.view()).unwrap();
        for (a, b) in h3.to_row_major().iter().zip(h.to_row_major()) {
            assert!((a - 9.0 * b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn singular_covariance_is_regularized() {
        let n = 50;
        let mut data = Array2::zeros((n, 2));
        for i in 0..n {
            data[[i, 0]] = i as f64;
            data[[i, 1]] = 2.0 * i as f64;
        }
        let h = BandwidthMatrix::normal_reference(data.view()).unwrap();
        assert!(h.det() > 0.0);
    }

    #[test]
    fn lipschitz_on_bounded_set() {
        let h = BandwidthMatrix::from_row_major(2, &[0.3, 0.1, 0.1, 0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Dense estimate of the Lipschitz constant from nearby pairs.
        let mut lip: f64 = 0.0;
        for _ in 0..20_000 {
            let x: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let y: [f64; 2] = [x[0] + rng.random_range(-1e-3..1e-3), x[1] + rng.random_range(-1e-3..1e-3)];
            let dist = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
            lip = lip.max((h.kernel_at(&x) - h.kernel_at(&y)).abs() / dist);
        }
        let bound = 1.05 * lip;
        for _ in 0..20_000 {
            let x: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let y: [f64; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let dist = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
            assert!((h.kernel_at(&x) - h.kernel_at(&y)).abs() <= bound * dist + 1e-15);
        }
    }
}

//! Small dense linear-algebra helpers shared by the estimators.
//!
//! Inverses of covariance-like matrices go through a symmetric
//! eigendecomposition so that singular directions are reported instead of
//! silently regularized.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold below which a symmetric matrix is singular.
pub const EIGEN_THRESHOLD: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix.
///
/// Fails with [`Error::SingularInformation`] when the smallest eigenvalue is
/// not above `EIGEN_THRESHOLD` times the largest one.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_inverse_scaled(m, 0.0)
}

/// Like [`spd_inverse`], with the singularity threshold taken relative to
/// `max(λ_max(m), scale)`. Use this when `m` is a difference of matrices of
/// size `scale`, so cancellation down to round-off is caught.
pub fn spd_inverse_scaled(m: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(scale);
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if !(max > 0.0) || min <= EIGEN_THRESHOLD * max {
        return Err(Error::SingularInformation { min_eigenvalue: min });
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose())
}

/// Thin singular value decomposition `m = U diag(σ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl Svd {
    fn reconstruction_error(&self, m: &DMatrix<f64>) -> f64 {
        (&self.u * DMatrix::from_diagonal(&self.singular_values) * &self.v_t - m).amax()
    }

    fn transposed(self) -> Self {
        Self {
            u: self.v_t.transpose(),
            singular_values: self.singular_values,
            v_t: self.u.transpose(),
        }
    }
}

fn nalgebra_svd(m: &DMatrix<f64>) -> Svd {
    let svd = m.clone().svd(true, true);
    Svd {
        u: svd.u.expect("u requested"),
        singular_values: svd.singular_values,
        v_t: svd.v_t.expect("v_t requested"),
    }
}

/// SVD checked by reconstruction.
///
/// nalgebra 0.35 occasionally returns a factorization that is off by ~1e−3
/// for rank-deficient input (a few in 10⁴ random low-rank matrices). A failed
/// check retries on `mᵀ`, then falls back to the eigendecomposition of `mᵀm`.
pub fn svd(m: &DMatrix<f64>) -> Svd {
    let tol = 1e-10 * m.amax().max(f64::MIN_POSITIVE) * (m.nrows() + m.ncols()) as f64;
    let direct = nalgebra_svd(m);
    if direct.reconstruction_error(m) <= tol {
        return direct;
    }
    let flipped = nalgebra_svd(&m.transpose()).transposed();
    if flipped.reconstruction_error(m) <= tol {
        return flipped;
    }
    let eig = SymmetricEigen::new(m.tr_mul(m));
    let sv = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let u = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        if sv[j] > 0.0 {
            (m.row(i) * eig.eigenvectors.column(j))[(0, 0)] / sv[j]
        } else {
            0.0
        }
    });
    Svd {
        u,
        singular_values: sv,
        v_t: eig.eigenvectors.transpose(),
    }
}

/// Moore-Penrose pseudoinverse via SVD, cutting singular values below
/// `rel_tol` times the largest.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = svd(m);
    let (u, v_t) = (&svd.u, &svd.v_t);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let cut = rel_tol * smax;
    let inv = svd
        .singular_values
        .map(|s| if s > cut && s > 0.0 { 1.0 / s } else { 0.0 });
    v_t.transpose() * DMatrix::from_diagonal(&inv) * u.transpose()
}

/// Numerical rank with the same relative cut as [`pinv`].
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = svd(m).singular_values;
    let smax = sv.iter().fold(0.0f64, |a, &s| a.max(s));
    sv.iter().filter(|&&s| s > rel_tol * smax && s > 0.0).count()
}

/// Orthonormal basis (as columns) of the column space of `m`.
pub fn column_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return DMatrix::zeros(rows, 0);
    }
    let svd = svd(m);
    let u = svd.u;
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > rel_tol * smax && s > 0.0)
        .map(|(i, _)| i)
        .collect();
    DMatrix::from_fn(rows, keep.len(), |r, c| u[(r, keep[c])])
}

/// Checks that a matrix is symmetric positive semidefinite up to `tol`
/// (relative to its largest eigenvalue magnitude).
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(1e-300);
    if asym > 1e-9 * scale {
        return false;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    eig.eigenvalues.iter().all(|&v| v >= -tol * max.max(1e-300))
}

pub fn outer(v: &DVector<f64>) -> DMatrix<f64> {
    v * v.transpose()
}

/// Relative Frobenius distance ‖a − b‖_F / ‖b‖_F.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Log-sum-exp with max subtraction.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values
        .clone()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values
        .into_iter()
        .map(|v| (v - max).exp())
        .sum::<f64>()
        .ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spd_inverse_matches_direct() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let inv = spd_inverse(&m).unwrap();
        let direct = m.clone().try_inverse().unwrap();
        assert_relative_eq!(inv, direct, epsilon = 1e-12);
    }

    #[test]
    fn spd_inverse_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            spd_inverse(&m),
            Err(Error::SingularInformation { .. })
        ));
        assert!(spd_inverse(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn pinv_of_rank_deficient() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let p = pinv(&m, 1e-10);
        // Moore-Penrose conditions
        assert_relative_eq!(&m * &p * &m, m.clone(), epsilon = 1e-12);
        assert_relative_eq!(&p * &m * &p, p.clone(), epsilon = 1e-12);
        assert_eq!(rank(&m, 1e-10), 1);
    }

    #[test]
    fn log_sum_exp_is_overflow_safe() {
        let v = [1000.0, 1000.0];
        assert_relative_eq!(log_sum_exp(v), 1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn svd_survives_bad_rank_deficient_input() {
        // nalgebra's own SVD reconstructs this centered matrix with error ~6e−3
        let phi = DMatrix::from_row_slice(
            3,
            3,
            &[
                -0.05836832219390553,
                -0.8530774891305204,
                0.6293128142511297,
                -0.08672508127990985,
                0.9690981587624932,
                0.12507111579019492,
                -0.557986486754328,
                0.37376839940844775,
                0.8660899431552656,
            ],
        );
        let c = phi.column_mean();
        let m = DMatrix::from_fn(3, 3, |i, y| phi[(i, y)] - c[i]);
        let s = svd(&m);
        assert!(s.reconstruction_error(&m) < 1e-12);
        assert_eq!(rank(&m, 1e-10), 2);
        let basis = column_space(&m, 1e-10);
        assert!((&basis * basis.tr_mul(&m) - &m).amax() < 1e-12);
        let p = pinv(&m, 1e-10);
        assert!((&m * &p * &m - &m).amax() < 1e-12);
    }
}

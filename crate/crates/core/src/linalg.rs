//! Small dense linear-algebra helpers shared by the planner, the adaptive
//! loop and the validators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// True when `m` is square, symmetric to `tol` and has no eigenvalue below `-tol`.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let asym = (m - m.transpose()).abs().max();
    asym <= tol.max(1e-12) * (1.0 + m.abs().max()) && min_eigenvalue(m) >= -tol
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues below zero
/// (round-off) are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Moore–Penrose pseudo-inverse via SVD.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (r.max(c) as f64) * f64::EPSILON;
    svd.pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(c, r))
}

/// Numerical rank with the usual SVD tolerance.
pub fn rank(m: &DMatrix<f64>) -> usize {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let tol = smax * (r.max(c) as f64) * f64::EPSILON * 10.0;
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Block-diagonal assembly.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Sample mean and (unbiased) covariance of row-vector samples.
pub fn sample_moments<'a, I>(samples: I, dim: usize) -> (DVector<f64>, DMatrix<f64>)
where
    I: IntoIterator<Item = &'a DVector<f64>> + Clone,
{
    let mut mean = DVector::zeros(dim);
    let mut count = 0usize;
    for s in samples.clone() {
        mean += s;
        count += 1;
    }
    if count == 0 {
        return (mean, DMatrix::zeros(dim, dim));
    }
    mean /= count as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    if count > 1 {
        cov /= (count - 1) as f64;
    }
    (mean, cov)
}

/// Parse a row-major nested vector into a matrix, checking rectangularity.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return None;
    }
    Some(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Inverse of [`matrix_from_rows`].
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

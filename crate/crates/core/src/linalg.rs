//! Dense linear-algebra helpers shared across the crate: numerical rank,
//! nullspace bases, pseudoinverses and condition numbers with a single
//! tolerance convention.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for all rank decisions.
pub const RANK_EPS: f64 = 1e-10;

/// Singular values below `max(nrows, ncols) * RANK_EPS * sigma_max` count as
/// zero.
pub fn rank_tolerance(mat: &DMatrix<f64>, sigma_max: f64) -> f64 {
    mat.nrows().max(mat.ncols()) as f64 * RANK_EPS * sigma_max
}

fn singular_values(mat: &DMatrix<f64>) -> DVector<f64> {
    mat.clone().svd(false, false).singular_values
}

/// Numerical rank via SVD thresholding.
pub fn rank(mat: &DMatrix<f64>) -> usize {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return 0;
    }
    let sv = singular_values(mat);
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    let tol = rank_tolerance(mat, smax);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Orthonormal basis of the right nullspace, one column vector per dimension.
///
/// Uses a full SVD; the matrix is padded with zero rows when it is wider than
/// tall so that all right singular vectors are available. `scale` is a
/// characteristic magnitude of the data the matrix was assembled from: the
/// cutoff is `max(dims) * eps * max(sigma_max, scale)`, so a matrix that is
/// pure cancellation dust relative to its inputs is treated as zero.
pub fn nullspace(mat: &DMatrix<f64>, eps: f64, scale: f64) -> Vec<DVector<f64>> {
    let ncols = mat.ncols();
    if ncols == 0 {
        return Vec::new();
    }
    let work = if mat.nrows() < ncols {
        let mut padded = DMatrix::zeros(ncols, ncols);
        padded.rows_mut(0, mat.nrows()).copy_from(mat);
        padded
    } else {
        mat.clone()
    };
    let svd = work.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    let sv = &svd.singular_values;
    let smax = sv.max().max(scale);
    let tol = if smax == 0.0 {
        0.0
    } else {
        work.nrows().max(ncols) as f64 * eps * smax
    };
    let mut basis = Vec::new();
    for i in 0..ncols {
        let s = if i < sv.len() { sv[i] } else { 0.0 };
        if s <= tol {
            basis.push(v_t.row(i).transpose());
        }
    }
    basis
}

/// Moore-Penrose pseudoinverse.
pub fn pinv(mat: &DMatrix<f64>) -> DMatrix<f64> {
    let sv = singular_values(mat);
    let smax = sv.max();
    let tol = if smax == 0.0 {
        0.0
    } else {
        rank_tolerance(mat, smax)
    };
    mat.clone()
        .svd(true, true)
        .pseudo_inverse(tol)
        .expect("pseudo_inverse with nonnegative tolerance")
}

/// 2-norm condition number; `f64::INFINITY` for singular matrices.
pub fn condition_number(mat: &DMatrix<f64>) -> f64 {
    let sv = singular_values(mat);
    let smax = sv.max();
    let smin = sv.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Inverse of a square matrix, failing on singular input.
pub fn invert(mat: &DMatrix<f64>, which: &'static str) -> Result<DMatrix<f64>> {
    mat.clone()
        .try_inverse()
        .ok_or(Error::Singular { which })
}

/// `mat^k` by repeated multiplication (desk-scale exponents only).
pub fn matrix_power(mat: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = mat.nrows();
    let mut acc = DMatrix::identity(n, n);
    for _ in 0..k {
        acc = &acc * mat;
    }
    acc
}

/// Minimum-norm least-squares solution of `a x = b` via SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    &pinv(a) * b
}

/// Stacked reachability matrix `[b, a b, ..., a^j b]`.
pub fn reachability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, m * (j + 1));
    let mut block = b.clone();
    for i in 0..=j {
        out.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    out
}

/// Stacked observability matrix `[c; c a; ...; c a^j]`.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let p = c.nrows();
    let mut out = DMatrix::zeros(p * (j + 1), n);
    let mut block = c.clone();
    for i in 0..=j {
        out.view_mut((i * p, 0), (p, n)).copy_from(&block);
        block = &block * a;
    }
    out
}

/// True when every entry is finite.
pub fn all_finite(mat: &DMatrix<f64>) -> bool {
    mat.iter().all(|x| x.is_finite())
}

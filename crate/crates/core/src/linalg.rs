//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{LqfError, Result};

/// Largest square matrix any module is willing to materialize.
pub const MATERIALIZE_LIMIT: usize = 20_000;

pub fn guard(dim: usize) -> Result<()> {
    if dim > MATERIALIZE_LIMIT {
        return Err(LqfError::GuardExceeded {
            dim,
            limit: MATERIALIZE_LIMIT,
        });
    }
    Ok(())
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Copies the upper triangle onto the lower one so the result is symmetric bit for bit.
pub fn mirror_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            m[(j, i)] = m[(i, j)];
        }
    }
}

/// `Q diag(f(values)) Qᵀ`, symmetrized.
pub fn spectral_map(values: &DVector<f64>, vectors: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = values.len();
    let mut scaled = vectors.clone();
    for j in 0..n {
        let s = f(values[j]);
        scaled.column_mut(j).scale_mut(s);
    }
    let mut out = &scaled * vectors.transpose();
    symmetrize(&mut out);
    out
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// One retry adds `1e-10 * trace / n` to the diagonal; a second failure is an error.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let n = m.nrows().max(1);
    let jitter = 1e-10 * m.trace().abs() / n as f64;
    let mut bumped = m.clone();
    for i in 0..m.nrows() {
        bumped[(i, i)] += jitter;
    }
    Cholesky::new(bumped).ok_or_else(|| {
        LqfError::NotPositiveDefinite(format!("cholesky failed after jitter {jitter:e}"))
    })
}

/// Numerical rank of a symmetric PSD matrix from its spectrum.
pub fn psd_rank(m: &DMatrix<f64>) -> usize {
    let (values, _) = sym_eigen_desc(m);
    let top = values.iter().cloned().fold(0.0f64, f64::max);
    let tol = top * m.nrows() as f64 * f64::EPSILON;
    values.iter().filter(|&&v| v > tol).count()
}

/// Solves `S X + X S = rhs` for symmetric positive `S = Q diag(roots) Qᵀ`.
pub fn sylvester_sym(roots: &DVector<f64>, vectors: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let rotated = vectors.transpose() * rhs * vectors;
    let n = roots.len();
    let mut solved = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            solved[(i, j)] = rotated[(i, j)] / (roots[i] + roots[j]);
        }
    }
    vectors * solved * vectors.transpose()
}

/// Dense inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = cholesky_with_jitter(m)?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn relative_error(actual: &DVector<f64>, expected: &DVector<f64>) -> f64 {
    let scale = expected.norm().max(f64::MIN_POSITIVE);
    (actual - expected).norm() / scale
}

//! Small dense linear-algebra helpers shared by the solver and the model types.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Schur, SymmetricEigen};

use crate::error::{Error, Result};

const EIG_MAX_ITER: usize = 10_000;

/// Relative symmetry tolerance applied when accepting user-provided shape matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Accepts `m` as symmetric when `max |m - mᵀ| <= SYMMETRY_TOL * max |m|` and returns
/// the symmetrized average.
pub fn symmetrized(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::validation(
            what,
            format!("matrix must be square, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    let scale = max_abs(m);
    let asym = max_abs(&(m - m.transpose()));
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::validation(
            what,
            format!("matrix is not symmetric (max asymmetry {asym:e})"),
        ));
    }
    Ok(sym(m))
}

pub(crate) fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::dim(
            "min_eig",
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("min_eig: non-finite entry".into()));
    }
    let eig = SymmetricEigen::try_new(sym(m), f64::EPSILON, EIG_MAX_ITER)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Spectral radius of a general square matrix, from the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    let schur = Schur::try_new(m.clone(), f64::EPSILON, EIG_MAX_ITER)
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
}

pub(crate) fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

pub(crate) fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

pub(crate) fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::validation(what, "matrix has no rows"));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::validation(what, "matrix has no columns"));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::validation(
                format!("{what}[{i}]"),
                format!("row has {} entries, expected {ncols}", r.len()),
            ));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_eig_examples() {
        assert!((min_eig(&DMatrix::identity(2, 2)).unwrap() - 1.0).abs() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -2.0]));
        assert!((min_eig(&d).unwrap() + 2.0).abs() < 1e-14);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((min_eig(&m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_eig_rejects_nan() {
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(min_eig(&m), Err(Error::Numerical(_))));
    }

    #[test]
    fn symmetry_tolerance() {
        let ok = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5 + 1e-12, 1.0]);
        let s = symmetrized(&ok, "P").unwrap();
        assert_eq!(s[(0, 1)], s[(1, 0)]);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.6, 1.0]);
        assert!(symmetrized(&bad, "P").is_err());
    }

    #[test]
    fn spectral_radius_rotation() {
        // eigenvalues ±i·0.9
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -0.9, 0.9, 0.0]);
        assert!((spectral_radius(&m).unwrap() - 0.9).abs() < 1e-12);
    }
}

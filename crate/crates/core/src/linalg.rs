//! Small dense linear algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest condition number accepted before a symmetric positive definite
/// matrix is treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Spectral condition number of a symmetric matrix. Infinite when the
/// smallest eigenvalue is not strictly positive.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factor of a symmetric positive definite matrix, rejecting
/// matrices whose condition number exceeds [`CONDITION_LIMIT`].
pub fn spd_cholesky(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "{what}: expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::singular(what, f64::INFINITY));
    }
    let cond = condition_number(a);
    if !(cond <= CONDITION_LIMIT) {
        return Err(Error::singular(what, cond));
    }
    Cholesky::new(a.clone()).ok_or_else(|| Error::singular(what, cond))
}

pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(spd_cholesky(a, what)?.inverse())
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    Ok(spd_cholesky(a, what)?.solve(b))
}

/// Symmetric square root of a positive semidefinite matrix. Eigenvalues in
/// `[-clip, 0)` are set to zero; anything more negative is an error.
pub fn psd_sqrt(a: &DMatrix<f64>, clip: f64) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -clip {
            return Err(Error::NotPositiveDefinite(format!(
                "eigenvalue {lambda:e} below clipping threshold {clip:e}"
            )));
        }
        roots[i] = lambda.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// A factor `L` with `L L' = a` for a covariance matrix. Uses the Cholesky
/// factor when `a` is positive definite and the symmetric root otherwise, so
/// degenerate (noise free) designs are still representable.
pub fn covariance_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = Cholesky::new(a.clone()) {
        return Ok(ch.l());
    }
    let scale = a.diagonal().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    psd_sqrt(a, 1e-12 * scale.max(1.0))
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square() && (a - a.transpose()).amax() <= tol * a.amax().max(1.0)
}

/// Column-major half vectorization: for each column `j`, rows `j..m`.
pub fn vech(a: &DMatrix<f64>) -> Vec<f64> {
    let m = a.nrows();
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    for j in 0..m {
        for i in j..m {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// Inverse of [`vech`]; the result is symmetric.
pub fn unvech(values: &[f64], m: usize) -> DMatrix<f64> {
    debug_assert_eq!(values.len(), m * (m + 1) / 2);
    let mut a = DMatrix::zeros(m, m);
    let mut idx = 0;
    for j in 0..m {
        for i in j..m {
            a[(i, j)] = values[idx];
            a[(j, i)] = values[idx];
            idx += 1;
        }
    }
    a
}

/// Column-major vectorization.
pub fn vec(a: &DMatrix<f64>) -> Vec<f64> {
    a.as_slice().to_vec()
}

pub fn unvec(values: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, values)
}

pub fn smallest_singular_value(a: &DMatrix<f64>) -> f64 {
    a.singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vech_round_trip_and_order() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        assert_eq!(vech(&a), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unvech(&vech(&a), 3), a);
    }

    #[test]
    fn vec_is_column_major() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec(&a), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvec(&vec(&a), 2, 2), a);
    }

    #[test]
    fn ill_conditioned_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        match spd_cholesky(&a, "test") {
            Err(Error::SingularDesign { condition, .. }) => assert!(condition > 1e12),
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn psd_sqrt_of_rank_deficient_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = psd_sqrt(&a, 1e-10).unwrap();
        assert!((&r * &r - &a).amax() < 1e-12);
        assert!(psd_sqrt(&(-a), 1e-10).is_err());
    }

    #[test]
    fn covariance_factor_handles_zero() {
        let z = DMatrix::<f64>::zeros(3, 3);
        let l = covariance_factor(&z).unwrap();
        assert_eq!(l.amax(), 0.0);
    }

    #[test]
    fn singular_values_ignore_sign() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.3, 2.0, -0.4, 0.1, 0.5]);
        let s1 = smallest_singular_value(&a);
        let s2 = smallest_singular_value(&(-a));
        assert!((s1 - s2).abs() < 1e-15);
    }
}

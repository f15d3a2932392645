//! Small dense helpers: least squares and symmetric solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ordinary least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Least squares of `y` on the columns of `design` (include an intercept
/// column yourself). Rank deficiency is detected from the singular values.
pub fn ols(design: &DMatrix<f64>, y: &[f64]) -> Result<OlsFit> {
    let (n, p) = design.shape();
    if y.len() != n {
        return Err(Error::Dimension(format!("design has {n} rows, outcome has {}", y.len())));
    }
    if n < p || p == 0 {
        return Err(Error::RankDeficient);
    }
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax.max(1e-300)) {
        return Err(Error::RankDeficient);
    }
    let yv = DVector::from_column_slice(y);
    let coef = svd.solve(&yv, 0.0).map_err(|_| Error::RankDeficient)?;
    let fitted = design * &coef;
    let residuals = &yv - &fitted;
    let dof = (n - p).max(1) as f64;
    let sigma2 = residuals.norm_squared() / dof;
    // (XᵀX)⁻¹ = V Σ⁻² Vᵀ
    let v_t = svd.v_t.as_ref().ok_or(Error::RankDeficient)?;
    let se = (0..p)
        .map(|j| {
            let var: f64 = (0..p).map(|k| (v_t[(k, j)] / svd.singular_values[k]).powi(2)).sum();
            (sigma2 * var).sqrt()
        })
        .collect();
    Ok(OlsFit {
        coef: coef.iter().copied().collect(),
        se,
        fitted: fitted.iter().copied().collect(),
        residuals: residuals.iter().copied().collect(),
    })
}

/// Solves `a x = b` for symmetric positive semi-definite `a`, adding a small
/// ridge when the Cholesky factorization fails.
pub(crate) fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    let scale = a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut ridge = 1e-12 * scale;
    for _ in 0..12 {
        let mut reg = a.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += ridge;
        }
        if let Some(ch) = reg.cholesky() {
            return Some(ch.solve(b));
        }
        ridge *= 100.0;
    }
    None
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_exact_line() {
        let design = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let fit = ols(&design, &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert!((fit.coef[0] - 1.0).abs() < 1e-12);
        assert!((fit.coef[1] - 2.0).abs() < 1e-12);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn ols_flags_collinear_columns() {
        let design = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 1.0, 3.0, 6.0]);
        assert_eq!(ols(&design, &[1.0, 2.0, 3.0]).unwrap_err(), Error::RankDeficient);
    }

    #[test]
    fn spd_solve_handles_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[2.0, 2.0]);
        let x = spd_solve(&a, &b).unwrap();
        assert!(((&a * &x) - &b).norm() < 1e-6);
    }
}

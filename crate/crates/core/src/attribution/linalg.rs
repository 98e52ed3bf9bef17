use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves the symmetric positive definite system `a x = b`.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let n = a.nrows();
    let chol = a.cholesky().ok_or_else(|| Error::Singular(format!("{what}: normal equations are not positive definite")))?;
    let x = chol.solve(&b);
    if x.iter().any(|v| !v.is_finite()) || x.len() != n {
        return Err(Error::Singular(format!("{what}: solution is not finite")));
    }
    Ok(x)
}

/// Weighted least squares `min Σ w_k (y_k - x_k·β)² + λ|β|²` via the
/// normal equations.
pub(crate) fn weighted_ridge(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64], lambda: f64, what: &str) -> Result<DVector<f64>> {
    let p = x.ncols();
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for (k, &wk) in w.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let row = x.row(k);
        for i in 0..p {
            let xi = row[i] * wk;
            if xi == 0.0 {
                continue;
            }
            xtwy[i] += xi * y[k];
            for j in 0..p {
                xtwx[(i, j)] += xi * row[j];
            }
        }
    }
    for i in 0..p {
        xtwx[(i, i)] += lambda;
    }
    solve_spd(xtwx, xtwy, what)
}

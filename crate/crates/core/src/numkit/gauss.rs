use super::{Mat, RngStream};
use crate::error::{Error, Result};

/// Lower-triangular factor `L` with `L L^T = sigma` for a symmetric positive
/// semi-definite `sigma`. Pivots within `jitter * max(1, max diag)` of zero
/// are treated as exact zeros (rank deficiency), anything more negative is
/// rejected.
pub fn cholesky_psd(sigma: &Mat, jitter: f64) -> Result<Mat> {
    let n = sigma.rows();
    if sigma.cols() != n {
        return Err(Error::Shape(format!(
            "covariance must be square, got {}x{}",
            n,
            sigma.cols()
        )));
    }
    sigma.ensure_finite("covariance")?;
    let scale = (0..n).fold(1.0f64, |m, i| m.max(sigma[(i, i)].abs()));
    let tol = jitter * scale;
    for i in 0..n {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > tol.max(1e-12 * scale) {
                return Err(Error::Decomposition(format!(
                    "covariance not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = sigma[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(Error::Decomposition(format!(
                "covariance is not positive semi-definite (pivot {j} = {d:e})"
            )));
        }
        if d <= tol {
            // zero pivot: the rest of column j must vanish too
            for i in j + 1..n {
                let mut r = sigma[(i, j)];
                for k in 0..j {
                    r -= l[(i, k)] * l[(j, k)];
                }
                if r.abs() > tol.sqrt() * scale.sqrt() {
                    return Err(Error::Decomposition(format!(
                        "covariance is not positive semi-definite (zero pivot {j} with coupling {r:e})"
                    )));
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut r = sigma[(i, j)];
            for k in 0..j {
                r -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = r / ljj;
        }
    }
    Ok(l)
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky_psd(a, 0.0)?;
    let n = a.rows();
    if b.len() != n {
        return Err(Error::Shape(format!("rhs length {} vs {n}", b.len())));
    }
    if (0..n).any(|i| l[(i, i)] == 0.0) {
        return Err(Error::Decomposition("matrix is singular".into()));
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut r = b[i];
        for k in 0..i {
            r -= l[(i, k)] * y[k];
        }
        y[i] = r / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut r = y[i];
        for k in i + 1..n {
            r -= l[(k, i)] * x[k];
        }
        x[i] = r / l[(i, i)];
    }
    Ok(x)
}

/// Draws `n` rows from `N(mean, cov)`.
pub fn gauss_sample(rng: &mut RngStream, mean: &[f64], cov: &Mat, n: usize) -> Result<Mat> {
    let dim = mean.len();
    if cov.shape() != (dim, dim) {
        return Err(Error::Shape(format!(
            "mean has dim {dim}, covariance is {}x{}",
            cov.rows(),
            cov.cols()
        )));
    }
    let l = cholesky_psd(cov, 1e-10)?;
    let mut out = Mat::zeros(n, dim);
    let mut z = vec![0.0; dim];
    for a in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.standard_normal();
        }
        let row = out.row_mut(a);
        for i in 0..dim {
            let mut v = mean[i];
            for k in 0..=i {
                v += l[(i, k)] * z[k];
            }
            row[i] = v;
        }
    }
    Ok(out)
}

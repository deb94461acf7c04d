use super::Mat;
use crate::error::{Error, Result};

/// Normalised 1-D Gaussian weights for offsets `-r..=r`.
pub fn gaussian_kernel_1d(kernel_size: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel_size.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "kernel size must be odd, got {kernel_size}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Argument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let r = (kernel_size / 2) as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Maps an out-of-range index into `0..n` by mirroring about the edges with
/// the edge sample repeated (`c b a | a b c | c b a`).
fn reflect(idx: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = idx.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur of a square field with reflect padding.
///
/// The edge-repeating reflection makes the operator column-stochastic for a
/// symmetric kernel, so the total mass of any field is preserved.
pub fn gaussian_blur_2d(field: &Mat, kernel_size: usize, sigma: f64) -> Result<Mat> {
    let n = field.rows();
    if field.cols() != n {
        return Err(Error::Shape(format!(
            "blur needs a square field, got {}x{}",
            field.rows(),
            field.cols()
        )));
    }
    let w = gaussian_kernel_1d(kernel_size, sigma)?;
    let r = (kernel_size / 2) as i64;
    let ni = n as i64;

    let mut tmp = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (t, wk) in w.iter().enumerate() {
                let jj = reflect(j as i64 + t as i64 - r, ni);
                acc += wk * field[(i, jj)];
            }
            tmp[(i, j)] = acc;
        }
    }
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (t, wk) in w.iter().enumerate() {
                let ii = reflect(i as i64 + t as i64 - r, ni);
                acc += wk * tmp[(ii, j)];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// The blur as an explicit `side^2 x side^2` operator on row-major flattened
/// fields: `blur(f).flatten() = B * f.flatten()`.
pub fn blur_operator(side: usize, kernel_size: usize, sigma: f64) -> Result<Mat> {
    let n = side * side;
    let mut op = Mat::zeros(n, n);
    let mut impulse = Mat::zeros(side, side);
    for p in 0..n {
        impulse.data_mut()[p] = 1.0;
        let response = gaussian_blur_2d(&impulse, kernel_size, sigma)?;
        op.set_col(p, response.data());
        impulse.data_mut()[p] = 0.0;
    }
    Ok(op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(2, 4), 2);
        assert_eq!(reflect(-9, 4), 0);
    }

    #[test]
    fn constant_field_is_fixed() {
        let f = Mat::filled(4, 4, 0.37);
        let b = gaussian_blur_2d(&f, 5, 1.3).unwrap();
        assert!(b.max_abs_diff(&f) < 1e-15);
    }

    #[test]
    fn impulse_gives_closed_form_stencil() {
        let mut f = Mat::zeros(5, 5);
        f[(2, 2)] = 1.0;
        let b = gaussian_blur_2d(&f, 3, 0.5).unwrap();
        // w(k) = exp(-k^2 / (2 * 0.25)) renormalised over k in {-1, 0, 1}
        let e = (-2.0f64).exp();
        let w0 = 1.0 / (1.0 + 2.0 * e);
        let w1 = e / (1.0 + 2.0 * e);
        let w = [w1, w0, w1];
        for di in 0..3 {
            for dj in 0..3 {
                assert!((b[(1 + di, 1 + dj)] - w[di] * w[dj]).abs() < 1e-15);
            }
        }
        assert_eq!(b[(0, 0)], 0.0);
        assert!((b.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mass_conserved_on_random_field() {
        let mut rng = RngStream::new(11, 0);
        let f = rng.normal_mat(16, 16, 1.0);
        for (k, s) in [(3, 0.5), (5, 1.0), (7, 2.5)] {
            let b = gaussian_blur_2d(&f, k, s).unwrap();
            assert!((b.sum() - f.sum()).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_sigma_is_identity() {
        let mut rng = RngStream::new(12, 0);
        let f = rng.normal_mat(4, 4, 1.0);
        let b = gaussian_blur_2d(&f, 3, 1e-3).unwrap();
        assert_eq!(b, f);
    }

    #[test]
    fn operator_matches_direct_blur() {
        let mut rng = RngStream::new(13, 0);
        let f = rng.normal_mat(4, 4, 1.0);
        let op = blur_operator(4, 3, 0.5).unwrap();
        let via_op = op.matvec(f.data()).unwrap();
        let direct = gaussian_blur_2d(&f, 3, 0.5).unwrap();
        for (a, b) in via_op.iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_args() {
        assert!(gaussian_blur_2d(&Mat::zeros(3, 4), 3, 0.5).is_err());
        assert!(gaussian_blur_2d(&Mat::zeros(4, 4), 4, 0.5).is_err());
        assert!(gaussian_blur_2d(&Mat::zeros(4, 4), 3, 0.0).is_err());
    }
}

use super::{dot, Mat};
use crate::error::{Error, Result};

/// Row-wise softmax with per-row max subtraction. With `causal`, entry
/// `(i, j)` for `j > i` is masked to exactly zero.
pub fn softmax_rows(m: &Mat, causal: bool) -> Result<Mat> {
    if m.is_empty() {
        return Err(Error::Argument("softmax of an empty matrix".into()));
    }
    if causal && m.rows() != m.cols() {
        return Err(Error::Shape(format!(
            "causal softmax needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    m.ensure_finite("softmax input")?;
    let mut out = Mat::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let visible = if causal { i + 1 } else { m.cols() };
        softmax_into(&m.row(i)[..visible], &mut out.row_mut(i)[..visible]);
    }
    Ok(out)
}

/// Stable softmax of `logits` written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Cosine similarity. Identical inputs give exactly 1.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    // sqrt(x*x) == |x| exactly in IEEE arithmetic, so cos(u, u) is exactly 1.
    let c = dot(u, v) / (uu * vv).sqrt();
    Ok(c.clamp(-1.0, 1.0))
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Mat, h: f64) -> Result<Mat>
where
    F: FnMut(&Mat) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!("step h must be positive, got {h}")));
    }
    let mut grad = Mat::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                stage: "finite difference",
                detail: format!("f = ({fp}, {fm}) at flat index {k}"),
            });
        }
        grad.data_mut()[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

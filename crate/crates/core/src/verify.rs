//! Monte Carlo and constructive checks of the sink-regime similarity
//! results: Gaussian-query map cosines, value-output cosines, the skip plus
//! out-projection extension, and the Gaussian moment-generating function.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    cholesky_psd, cosine, dot, gauss_sample, softmax_rows, solve_spd, Mat, RngStream,
};
use crate::stats::{loglog_fit, mean, ols, std_dev, std_err, LinearFit};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McCell {
    pub label: String,
    pub n_c: Option<usize>,
    pub eps: Option<f64>,
    pub pair: Option<(usize, usize)>,
    pub predicted: Option<f64>,
    pub mean: f64,
    pub std_err: f64,
    pub abs_dev: Option<f64>,
    pub bound: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub name: String,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub band: (f64, f64),
    pub passed: bool,
}

impl FitReport {
    fn new(name: &str, fit: LinearFit, band: (f64, f64)) -> Self {
        Self {
            name: name.into(),
            slope: fit.slope,
            intercept: fit.intercept,
            r2: fit.r2,
            band,
            passed: fit.slope >= band.0 && fit.slope <= band.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McReport {
    pub name: String,
    pub cells: Vec<McCell>,
    pub fits: Vec<FitReport>,
    pub checks: Vec<Check>,
    pub flags: Vec<String>,
    /// Measurements only; nothing is asserted.
    pub report_only: bool,
}

impl McReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            cells: Vec::new(),
            fits: Vec::new(),
            checks: Vec::new(),
            flags: Vec::new(),
            report_only: false,
        }
    }

    pub fn passed(&self) -> bool {
        self.report_only
            || (self.fits.iter().all(|f| f.passed) && self.checks.iter().all(|c| c.passed))
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .fits
            .iter()
            .filter(|f| !f.passed)
            .map(|f| {
                format!(
                    "{}: slope {:.4} outside [{}, {}]",
                    f.name, f.slope, f.band.0, f.band.1
                )
            })
            .collect();
        out.extend(
            self.checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| format!("{}: {}", c.name, c.detail)),
        );
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        let csv_err = |e: csv::Error| Error::Config(e.to_string());
        w.write_record([
            "label",
            "n_c",
            "eps",
            "pair_i",
            "pair_j",
            "predicted",
            "mean",
            "std_err",
            "abs_dev",
            "bound",
        ])
        .map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                c.label.clone(),
                c.n_c.map(|n| n.to_string()).unwrap_or_default(),
                opt(c.eps),
                c.pair.map(|p| p.0.to_string()).unwrap_or_default(),
                c.pair.map(|p| p.1.to_string()).unwrap_or_default(),
                opt(c.predicted),
                format!("{:.17e}", c.mean),
                format!("{:.17e}", c.std_err),
                opt(c.abs_dev),
                opt(c.bound),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `exp(-1/2 dk^T W_c^T Sigma W_c dk)`.
pub fn prop1_predict(k_i: &[f64], k_j: &[f64], w_c: &Mat, sigma: &Mat) -> Result<f64> {
    if k_i.len() != k_j.len()
        || w_c.cols() != k_i.len()
        || sigma.shape() != (w_c.rows(), w_c.rows())
    {
        return Err(Error::Shape(
            "prop1_predict: inconsistent dimensions".into(),
        ));
    }
    let dk: Vec<f64> = k_i.iter().zip(k_j).map(|(a, b)| a - b).collect();
    let w = w_c.matvec(&dk)?;
    let sw = sigma.matvec(&w)?;
    Ok((-0.5 * dot(&w, &sw)).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Config {
    pub n_c_grid: Vec<usize>,
    pub mu: Vec<f64>,
    pub sigma: Mat,
    /// `q_dim x key_dim`.
    pub w_c: Mat,
    /// Row 0 is the sink token.
    pub keys: Mat,
    pub eps_target: f64,
    pub trials: usize,
    pub seed: u64,
    /// Envelope constant `c` in `c (1/sqrt(N_c) + eps_target)`.
    pub envelope: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop1Construction {
    pub dim: usize,
    pub tokens: usize,
    /// `mu^T W_c k_1 - mu^T W_c k_i`.
    pub sink_gap: f64,
    pub mu_norm: f64,
    /// Query variance along the sink direction.
    pub sink_axis_var: f64,
    /// Range of `k_i^T W_c^T Sigma W_c k_i` for content keys; keeps the
    /// log-normal map entries in the central-limit regime.
    pub key_var: (f64, f64),
    pub sigma_scale: f64,
}

impl Default for Prop1Construction {
    fn default() -> Self {
        Self {
            dim: 8,
            tokens: 6,
            sink_gap: 8.0,
            mu_norm: 4.0,
            sink_axis_var: 0.0025,
            key_var: (0.05, 0.4),
            sigma_scale: 0.7,
        }
    }
}

impl Prop1Config {
    /// Sink realised through the keys: `mu` lies on axis 0, the sink key is
    /// `(gap / |mu|) e_0`, content keys live in the orthogonal complement.
    pub fn construct(seed: u64, c: &Prop1Construction) -> Result<Self> {
        if c.dim < 2 || c.tokens < 3 {
            return Err(Error::Argument(
                "prop1 construction needs dim >= 2 and >= 3 tokens".into(),
            ));
        }
        let mut rng = RngStream::new(seed, 0x9);
        let d = c.dim;
        let mut mu = vec![0.0; d];
        mu[0] = c.mu_norm;
        let b = rng.normal_mat(d - 1, d - 1, 1.0);
        let perp = b.matmul_t(&b)?.scale(c.sigma_scale / (d - 1) as f64);
        let mut sigma = Mat::zeros(d, d);
        sigma[(0, 0)] = c.sink_axis_var;
        for i in 1..d {
            for j in 1..d {
                sigma[(i, j)] = perp[(i - 1, j - 1)];
            }
        }
        let mut keys = Mat::zeros(c.tokens, d);
        keys[(0, 0)] = c.sink_gap / c.mu_norm;
        for t in 1..c.tokens {
            let mut k = rng.normal_vec(d, 1.0);
            k[0] = 0.0;
            let var = dot(&k, &sigma.matvec(&k)?);
            let target = rng.uniform_range(c.key_var.0, c.key_var.1);
            let scale = (target / var).sqrt();
            for (j, v) in k.into_iter().enumerate() {
                keys[(t, j)] = scale * v;
            }
        }
        Ok(Self {
            n_c_grid: vec![256, 512, 1024, 2048, 4096],
            mu,
            sigma,
            w_c: Mat::identity(d),
            keys,
            eps_target: 0.02,
            trials: 200,
            seed,
            envelope: 3.0,
        })
    }

    fn check_construction(&self) -> Result<()> {
        let wk = self.keys.matmul_t(&self.w_c)?;
        let mu_k: Vec<f64> = (0..wk.rows()).map(|i| dot(&self.mu, wk.row(i))).collect();
        for (i, m) in mu_k.iter().enumerate().skip(1) {
            let r = (m - mu_k[0]).exp();
            if r > self.eps_target {
                return Err(Error::Construction(format!(
                    "token {i}: exp(mu_i - mu_1) = {r:.3e} exceeds eps_target {}",
                    self.eps_target
                )));
            }
        }
        cholesky_psd(&self.sigma, 1e-10)?;
        Ok(())
    }
}

struct Prop1Cell {
    n_c: usize,
    /// `[pair][trial]`
    cos: Vec<Vec<f64>>,
    violations: usize,
    rows: usize,
    mean_eps: f64,
}

fn prop1_cell(
    cfg: &Prop1Config,
    pairs: &[(usize, usize)],
    cell: usize,
    n_c: usize,
) -> Result<Prop1Cell> {
    let mut rng = RngStream::new(cfg.seed, 1000 + cell as u64);
    let wk = cfg.keys.matmul_t(&cfg.w_c)?;
    let mut cos = vec![Vec::with_capacity(cfg.trials); pairs.len()];
    let (mut violations, mut eps_sum) = (0usize, 0.0);
    for _ in 0..cfg.trials {
        let q = gauss_sample(&mut rng, &cfg.mu, &cfg.sigma, n_c)?;
        let a = softmax_rows(&q.matmul_t(&wk)?, false)?;
        for r in 0..n_c {
            let row = a.row(r);
            let eps = row[1..].iter().sum::<f64>() / row[0];
            eps_sum += eps;
            if eps > cfg.eps_target {
                violations += 1;
            }
        }
        let cols: Vec<Vec<f64>> = (0..a.cols()).map(|j| a.col(j)).collect();
        for (p, &(i, j)) in pairs.iter().enumerate() {
            cos[p].push(cosine(&cols[i], &cols[j])?);
        }
    }
    let rows = n_c * cfg.trials;
    Ok(Prop1Cell {
        n_c,
        cos,
        violations,
        rows,
        mean_eps: eps_sum / rows as f64,
    })
}

pub fn prop1_measure(cfg: &Prop1Config) -> Result<McReport> {
    if cfg.trials < 2 || cfg.n_c_grid.is_empty() {
        return Err(Error::Argument(
            "prop1 needs >= 2 trials and a non-empty N_c grid".into(),
        ));
    }
    cfg.check_construction()?;
    let s = cfg.keys.rows();
    let pairs: Vec<(usize, usize)> = (1..s)
        .flat_map(|i| (i + 1..s).map(move |j| (i, j)))
        .collect();
    let cells: Vec<Prop1Cell> = cfg
        .n_c_grid
        .par_iter()
        .enumerate()
        .map(|(c, &n)| prop1_cell(cfg, &pairs, c, n))
        .collect::<Result<_>>()?;

    let mut report = McReport::new("prop1");
    let mut sampling = Vec::with_capacity(cells.len());
    for cell in &cells {
        let frac = cell.violations as f64 / cell.rows as f64;
        if frac > 0.01 {
            return Err(Error::Construction(format!(
                "N_c = {}: sink violated in {:.2}% of rows (eps_row > {})",
                cell.n_c,
                100.0 * frac,
                cfg.eps_target
            )));
        }
        let bound = cfg.envelope * (1.0 / (cell.n_c as f64).sqrt() + cfg.eps_target);
        let mut worst: f64 = 0.0;
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let pred = prop1_predict(cfg.keys.row(i), cfg.keys.row(j), &cfg.w_c, &cfg.sigma)?;
            let m = mean(&cell.cos[p]);
            let dev = (m - pred).abs();
            worst = worst.max(dev);
            report.cells.push(McCell {
                label: "cos".into(),
                n_c: Some(cell.n_c),
                eps: Some(cell.mean_eps),
                pair: Some((i, j)),
                predicted: Some(pred),
                mean: m,
                std_err: std_err(&cell.cos[p]),
                abs_dev: Some(dev),
                bound: Some(bound),
            });
        }
        report.checks.push(Check {
            name: format!("envelope N_c={}", cell.n_c),
            passed: worst <= bound,
            detail: format!(
                "max |measured - predicted| = {worst:.5}, bound {bound:.5}, mean eps_row {:.2e}",
                cell.mean_eps
            ),
        });
        let spread: Vec<f64> = cell.cos.iter().map(|c| std_dev(c)).collect();
        sampling.push(mean(&spread));
    }
    let n: Vec<f64> = cells.iter().map(|c| c.n_c as f64).collect();
    if n.len() >= 2 {
        report.fits.push(FitReport::new(
            "sampling spread vs N_c",
            loglog_fit(&n, &sampling)?,
            (-0.65, -0.35),
        ));
    }
    Ok(report)
}

/// How the value inner products `R_mn = (W_v e_m) . (W_v e_n)` scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RRegime {
    /// `|R_mn| / R_11 ~ 1/eps`, `|R_1m| / R_11 ~ 1`.
    #[default]
    ContentDominated,
    /// `R_11` dominant instead; violates the precondition.
    BosDominated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop2Config {
    pub tokens: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub num_heads: usize,
    pub eps_grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub regime: RRegime,
}

impl Default for Prop2Config {
    fn default() -> Self {
        Self {
            tokens: 8,
            embed_dim: 16,
            head_dim: 8,
            num_heads: 2,
            eps_grid: vec![0.1, 0.05, 0.02, 0.01],
            trials: 200,
            seed: 0,
            regime: RRegime::ContentDominated,
        }
    }
}

impl Prop2Config {
    fn validate(&self) -> Result<()> {
        if self.tokens < 3
            || self.head_dim < 2
            || self.embed_dim < self.head_dim
            || self.num_heads == 0
        {
            return Err(Error::Argument(
                "prop2 needs >= 3 tokens, head_dim >= 2 and embed_dim >= head_dim".into(),
            ));
        }
        if self.trials == 0 || self.eps_grid.iter().any(|e| !(*e >= 0.0 && *e < 1.0)) {
            return Err(Error::Argument(
                "prop2 needs trials >= 1 and eps in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Sink-shaped attention rows: `T_i1 = 1/(1+eps)` and the remaining
/// `eps/(1+eps)` spread over `2..=i` with the given positive weights.
pub fn sink_rows(eps: f64, weights: &Mat) -> Mat {
    let s = weights.rows();
    let mut t = Mat::zeros(s, s);
    t[(0, 0)] = 1.0;
    for i in 1..s {
        t[(i, 0)] = 1.0 / (1.0 + eps);
        let total: f64 = weights.row(i)[1..=i].iter().sum();
        for m in 1..=i {
            t[(i, m)] = eps / (1.0 + eps) * weights[(i, m)] / total;
        }
    }
    t
}

fn random_weights(rng: &mut RngStream, s: usize) -> Mat {
    Mat::from_fn(s, s, |_, _| rng.uniform_range(0.2, 1.0))
}

fn orthogonal_unit(rng: &mut RngStream, to: &[f64]) -> Vec<f64> {
    let mut u = rng.normal_vec(to.len(), 1.0);
    let p = dot(&u, to) / dot(to, to);
    for (a, b) in u.iter_mut().zip(to) {
        *a -= p * b;
    }
    let n = dot(&u, &u).sqrt();
    u.iter().map(|v| v / n).collect()
}

/// Value vectors with the requested `R` scaling, and embeddings realising
/// them through a random `W_v` (minimum-norm preimages).
pub struct ValueConstruction {
    pub w_v: Mat,
    pub embeddings: Mat,
    pub values: Mat,
}

pub fn prop2_construct(
    rng: &mut RngStream,
    cfg: &Prop2Config,
    eps: f64,
) -> Result<ValueConstruction> {
    let (s, dh, de) = (cfg.tokens, cfg.head_dim, cfg.embed_dim);
    let v1 = rng.unit_vec(dh);
    let c = orthogonal_unit(rng, &v1);
    let mut values = Mat::zeros(s, dh);
    let inv_sqrt = if eps > 0.0 { eps.powf(-0.5) } else { 0.0 };
    match cfg.regime {
        RRegime::ContentDominated => values.row_mut(0).copy_from_slice(&v1),
        RRegime::BosDominated => {
            let big = if eps > 0.0 { 1.0 / eps } else { 1.0 };
            for (o, v) in values.row_mut(0).iter_mut().zip(&v1) {
                *o = big * v;
            }
        }
    }
    for m in 1..s {
        let a = rng.uniform_range(0.7, 1.3);
        // perturbation orthogonal to v_1 and c, so |u|^2 = 1 + |g|^2
        let mut g = rng.normal_vec(dh, 0.4 / (dh as f64).sqrt());
        for basis in [&v1, &c] {
            let p = dot(&g, basis);
            for (x, y) in g.iter_mut().zip(basis.iter()) {
                *x -= p * y;
            }
        }
        let u: Vec<f64> = c.iter().zip(&g).map(|(c, g)| c + g).collect();
        let (scale_a, scale_u) = match cfg.regime {
            RRegime::ContentDominated => (a, inv_sqrt),
            RRegime::BosDominated => (a, 1.0),
        };
        for (k, o) in values.row_mut(m).iter_mut().enumerate() {
            *o = scale_a * v1[k] + scale_u * u[k];
        }
    }
    let w_v = rng.normal_mat(dh, de, 1.0 / (de as f64).sqrt());
    // e = W_v^T (W_v W_v^T)^{-1} v
    let gram = w_v.matmul_t(&w_v)?;
    let mut embeddings = Mat::zeros(s, de);
    for m in 0..s {
        let coeff = solve_spd(&gram, values.row(m))?;
        let e = w_v.transpose().matvec(&coeff)?;
        embeddings.row_mut(m).copy_from_slice(&e);
    }
    Ok(ValueConstruction {
        w_v,
        embeddings,
        values,
    })
}

/// Checks `|R_1m| / R_11` and `eps |R_mn| / R_11` lie within a factor 2 of 1.
pub fn check_r_ratios(values: &Mat, eps: f64) -> Result<()> {
    let r = values.matmul_t(values)?;
    let r11 = r[(0, 0)];
    let within = |x: f64| (0.5..=2.0).contains(&x);
    for m in 1..values.rows() {
        let x = r[(0, m)].abs() / r11;
        if !within(x) {
            return Err(Error::Construction(format!(
                "|R_1{}|/R_11 = {x:.3e}, expected ~1",
                m + 1
            )));
        }
        if eps > 0.0 {
            for n in 1..values.rows() {
                let y = eps * r[(m, n)].abs() / r11;
                if !within(y) {
                    return Err(Error::Construction(format!(
                        "eps |R_{}{}|/R_11 = {y:.3e}, expected ~1",
                        m + 1,
                        n + 1
                    )));
                }
            }
        }
    }
    Ok(())
}

/// `1 - min_{i<j, i,j>=2} cos(o_i, o_j)` for one head; flags clipping.
fn min_pair_gap(t: &Mat, w_v: &Mat, e: &Mat) -> Result<(f64, bool)> {
    let o = t.matmul(&e.matmul_t(w_v)?)?;
    let mut min_cos = f64::INFINITY;
    for i in 1..o.rows() {
        for j in i + 1..o.rows() {
            min_cos = min_cos.min(cosine(o.row(i), o.row(j))?);
        }
    }
    let gap = 1.0 - min_cos;
    Ok(if gap < 0.0 { (0.0, true) } else { (gap, false) })
}

pub fn prop2_measure(cfg: &Prop2Config) -> Result<McReport> {
    cfg.validate()?;
    let mut report = McReport::new("prop2");
    let cells: Vec<(f64, Vec<f64>, bool)> = cfg
        .eps_grid
        .par_iter()
        .map(|&eps| {
            let mut gaps = Vec::with_capacity(cfg.trials);
            let mut clipped = false;
            for trial in 0..cfg.trials {
                // common random numbers across eps
                let mut rng = RngStream::new(cfg.seed, 2000 + trial as u64);
                let mut worst: f64 = 0.0;
                for _ in 0..cfg.num_heads {
                    let vc = prop2_construct(&mut rng, cfg, eps)?;
                    check_r_ratios(&vc.values, eps)?;
                    let t = sink_rows(eps, &random_weights(&mut rng, cfg.tokens));
                    let (g, c) = min_pair_gap(&t, &vc.w_v, &vc.embeddings)?;
                    clipped |= c;
                    worst = worst.max(g);
                }
                gaps.push(worst);
            }
            Ok((eps, gaps, clipped))
        })
        .collect::<Result<_>>()?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (eps, gaps, clipped) in &cells {
        if *clipped {
            report
                .flags
                .push(format!("eps = {eps}: negative 1 - cos clipped to 0"));
        }
        let m = mean(gaps);
        report.cells.push(McCell {
            label: "1-min_cos".into(),
            n_c: None,
            eps: Some(*eps),
            pair: None,
            predicted: None,
            mean: m,
            std_err: std_err(gaps),
            abs_dev: None,
            bound: None,
        });
        if *eps > 0.0 {
            xs.push(*eps);
            ys.push(m);
        } else {
            let worst = gaps.iter().cloned().fold(0.0, f64::max);
            report.checks.push(Check {
                name: "eps = 0 gives parallel outputs".into(),
                passed: worst <= 1e-12,
                detail: format!("max 1 - cos = {worst:.3e}"),
            });
        }
    }
    if xs.len() >= 2 {
        report.fits.push(FitReport::new(
            "1 - cos vs eps (log-log)",
            loglog_fit(&xs, &ys)?,
            (0.8, 1.2),
        ));
        let lin = ols(&xs, &ys)?;
        let ymax = ys.iter().cloned().fold(0.0, f64::max);
        report.checks.push(Check {
            name: "linear constant c <= 10".into(),
            passed: lin.slope <= 10.0,
            detail: format!("c = {:.4}", lin.slope),
        });
        report.checks.push(Check {
            name: "intercept ~ 0".into(),
            passed: lin.intercept.abs() <= 0.1 * ymax,
            detail: format!(
                "intercept = {:.3e}, max(1 - cos) = {ymax:.3e}",
                lin.intercept
            ),
        });
        for (x, y) in xs.iter().zip(&ys) {
            report.checks.push(Check {
                name: format!("cos >= 1 - c eps at eps = {x}"),
                passed: *y <= 10.0 * x,
                detail: format!("1 - cos = {y:.3e}"),
            });
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct A4Config {
    pub tokens: usize,
    pub head_dim: usize,
    pub num_heads: usize,
    pub eps_grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Without the skip connection nothing is asserted.
    pub skip: bool,
    /// Make every non-BOS attention weight in a row equal.
    pub flat_rows: bool,
}

impl Default for A4Config {
    fn default() -> Self {
        Self {
            tokens: 8,
            head_dim: 4,
            num_heads: 2,
            eps_grid: vec![0.1, 0.05, 0.02, 0.01],
            trials: 200,
            seed: 0,
            skip: true,
            flat_rows: false,
        }
    }
}

/// Per-token pieces of one attention layer output.
pub struct A4Decomposition {
    /// `e_i`
    pub input: Mat,
    /// `e'_i`: BOS term plus the row-average term.
    pub mean_part: Mat,
    /// `delta e_i`: deviation from the row average.
    pub deviation: Mat,
    /// `e_i^out`
    pub output: Mat,
}

/// Splits `W_out concat_h[sum_m T_im W_v e_m]` around the per-row mean
/// `tau_i` of the non-BOS weights `T_i2..T_ii`.
pub fn a4_decompose(
    e: &Mat,
    t: &[Mat],
    w_v: &[Mat],
    w_out: &Mat,
    skip: bool,
) -> Result<A4Decomposition> {
    let s = e.rows();
    let heads = t.len();
    let dh = w_v[0].rows();
    let mut mean_cat = Mat::zeros(s, heads * dh);
    let mut dev_cat = Mat::zeros(s, heads * dh);
    let mut full_cat = Mat::zeros(s, heads * dh);
    for h in 0..heads {
        let v = e.matmul_t(&w_v[h])?;
        let o = t[h].matmul(&v)?;
        for i in 0..s {
            let mut mean_o: Vec<f64> = v.row(0).iter().map(|x| t[h][(i, 0)] * x).collect();
            let mut dev_o = vec![0.0; dh];
            if i >= 1 {
                let tau = (1..=i).map(|m| t[h][(i, m)]).sum::<f64>() / i as f64;
                for m in 1..=i {
                    let dt = t[h][(i, m)] - tau;
                    for k in 0..dh {
                        mean_o[k] += tau * v[(m, k)];
                        dev_o[k] += dt * v[(m, k)];
                    }
                }
            }
            mean_cat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(&mean_o);
            dev_cat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(&dev_o);
            full_cat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(o.row(i));
        }
    }
    let mean_part = mean_cat.matmul_t(w_out)?;
    let deviation = dev_cat.matmul_t(w_out)?;
    let mut output = full_cat.matmul_t(w_out)?;
    let input = if skip {
        e.clone()
    } else {
        Mat::zeros(s, e.cols())
    };
    output.add_assign(&input)?;
    Ok(A4Decomposition {
        input,
        mean_part,
        deviation,
        output,
    })
}

struct A4Cell {
    eps: f64,
    diffs: Vec<f64>,
    /// medians of `eps |e|`, `|e'|`, `|delta e| / eps`
    norms: [f64; 3],
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn a4_cell(cfg: &A4Config, eps: f64) -> Result<A4Cell> {
    let (s, dh, hh) = (cfg.tokens, cfg.head_dim, cfg.num_heads);
    let d = dh * hh;
    let mut diffs = Vec::new();
    let mut norms = [Vec::new(), Vec::new(), Vec::new()];
    for trial in 0..cfg.trials {
        let mut rng = RngStream::new(cfg.seed, 3000 + trial as u64);
        let mut e = Mat::zeros(s, d);
        for i in 0..s {
            let u = rng.unit_vec(d);
            for (o, x) in e.row_mut(i).iter_mut().zip(u) {
                *o = x / eps;
            }
        }
        let w_v: Vec<Mat> = (0..hh)
            .map(|_| rng.normal_mat(dh, d, 1.0 / (d as f64).sqrt()).scale(eps))
            .collect();
        let w_out = rng.normal_mat(d, d, 1.0 / (d as f64).sqrt());
        let t: Vec<Mat> = (0..hh)
            .map(|_| {
                let w = if cfg.flat_rows {
                    Mat::filled(s, s, 1.0)
                } else {
                    random_weights(&mut rng, s)
                };
                sink_rows(eps, &w)
            })
            .collect();
        let dec = a4_decompose(&e, &t, &w_v, &w_out, cfg.skip)?;
        let base = dec.input.add(&dec.mean_part)?;
        for i in 1..s {
            norms[0].push(eps * crate::numkit::norm(e.row(i)));
            norms[1].push(crate::numkit::norm(dec.mean_part.row(i)));
            norms[2].push(crate::numkit::norm(dec.deviation.row(i)) / eps);
            for j in i + 1..s {
                let a = cosine(dec.output.row(i), dec.output.row(j))?;
                let b = cosine(base.row(i), base.row(j))?;
                diffs.push((a - b).abs());
            }
        }
    }
    let [n0, n1, n2] = norms;
    Ok(A4Cell {
        eps,
        diffs,
        norms: [median(n0), median(n1), median(n2)],
    })
}

pub fn a4_extension_measure(cfg: &A4Config) -> Result<McReport> {
    if cfg.tokens < 3 || cfg.trials == 0 || cfg.eps_grid.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(Error::Argument(
            "a4 needs >= 3 tokens, trials >= 1 and eps in (0, 1)".into(),
        ));
    }
    let cells: Vec<A4Cell> = cfg
        .eps_grid
        .par_iter()
        .map(|&eps| a4_cell(cfg, eps))
        .collect::<Result<_>>()?;
    let mut report = McReport::new("a4");
    report.report_only = !cfg.skip;
    if !cfg.skip {
        report
            .flags
            .push("skip connection removed: report-only".into());
    }
    let reference = cells[0].norms;
    for cell in &cells {
        let mut ok = (0.5..=2.0).contains(&cell.norms[0]);
        if !cfg.flat_rows {
            for (n, r) in cell.norms[1..3].iter().zip(&reference[1..3]) {
                ok &= (0.5..=2.0).contains(&(n / r));
            }
        }
        if !ok && cfg.skip {
            return Err(Error::Construction(format!(
                "eps = {}: norm regime off by more than a factor 2 (eps|e| = {:.3}, |e'| = {:.3}, |de|/eps = {:.3})",
                cell.eps, cell.norms[0], cell.norms[1], cell.norms[2]
            )));
        }
        report.cells.push(McCell {
            label: "|cos_out - cos(e+e')|".into(),
            n_c: None,
            eps: Some(cell.eps),
            pair: None,
            predicted: None,
            mean: mean(&cell.diffs),
            std_err: std_err(&cell.diffs),
            abs_dev: None,
            bound: None,
        });
    }
    if cfg.flat_rows {
        let worst = cells
            .iter()
            .flat_map(|c| c.diffs.iter().copied())
            .fold(0.0, f64::max);
        report.checks.push(Check {
            name: "flat rows give zero deviation".into(),
            passed: worst == 0.0 || worst <= 1e-15,
            detail: format!("max difference {worst:.3e}"),
        });
    } else if cells.len() >= 2 {
        let xs: Vec<f64> = cells.iter().map(|c| c.eps).collect();
        let ys: Vec<f64> = cells.iter().map(|c| mean(&c.diffs)).collect();
        report.fits.push(FitReport::new(
            "difference vs eps (log-log)",
            loglog_fit(&xs, &ys)?,
            (1.6, 2.4),
        ));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MgfConfig {
    pub cases: usize,
    pub draws: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for MgfConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            draws: 100_000,
            dim: 4,
            seed: 0,
        }
    }
}

/// Empirical `E[exp(q . r)]` for `q ~ N(mu, Sigma)` against
/// `exp(r . mu + r^T Sigma r / 2)`, within 3 standard errors.
pub fn mgf_check(cfg: &MgfConfig) -> Result<McReport> {
    let cases: Vec<(McCell, Check)> = (0..cfg.cases)
        .into_par_iter()
        .map(|case| {
            let mut rng = RngStream::new(cfg.seed, 4000 + case as u64);
            let mu = rng.normal_vec(cfg.dim, 0.5);
            let b = rng.normal_mat(cfg.dim, cfg.dim, 1.0);
            let sigma = b.matmul_t(&b)?.scale(1.0 / cfg.dim as f64);
            let mut r = rng.unit_vec(cfg.dim);
            let srs = dot(&r, &sigma.matvec(&r)?);
            let target = rng.uniform_range(0.05, 0.5);
            let k = (target / srs).sqrt();
            for v in &mut r {
                *v *= k;
            }
            let srs = dot(&r, &sigma.matvec(&r)?);
            let predicted = (dot(&r, &mu) + 0.5 * srs).exp();
            let q = gauss_sample(&mut rng, &mu, &sigma, cfg.draws)?;
            let samples: Vec<f64> = (0..cfg.draws).map(|a| dot(q.row(a), &r).exp()).collect();
            let m = mean(&samples);
            let se = std_err(&samples);
            let dev = (m - predicted).abs();
            Ok((
                McCell {
                    label: "mgf".into(),
                    n_c: Some(cfg.draws),
                    eps: None,
                    pair: None,
                    predicted: Some(predicted),
                    mean: m,
                    std_err: se,
                    abs_dev: Some(dev),
                    bound: Some(3.0 * se),
                },
                Check {
                    name: format!("case {case}"),
                    passed: dev <= 3.0 * se,
                    detail: format!(
                        "|{m:.6} - {predicted:.6}| = {dev:.3e}, 3 se = {:.3e}",
                        3.0 * se
                    ),
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut report = McReport::new("mgf");
    for (cell, check) in cases {
        report.cells.push(cell);
        report.checks.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn predict_examples() {
        let i2 = Mat::identity(2);
        assert_eq!(
            prop1_predict(&[0.3, 0.1], &[0.3, 0.1], &i2, &i2).unwrap(),
            1.0
        );
        assert_eq!(
            prop1_predict(&[3.0, 1.0], &[0.0, 0.0], &i2, &Mat::zeros(2, 2)).unwrap(),
            1.0
        );
        let v = prop1_predict(&[1.0, 0.0], &[0.0, 0.0], &i2, &i2).unwrap();
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(prop1_predict(&[1.0], &[0.0, 0.0], &i2, &i2).is_err());
    }

    #[test]
    fn duplicated_keys_measure_exactly_one() {
        let mut cfg = Prop1Config::construct(1, &Prop1Construction::default()).unwrap();
        let row = cfg.keys.row(1).to_vec();
        cfg.keys.row_mut(2).copy_from_slice(&row);
        cfg.n_c_grid = vec![64];
        cfg.trials = 5;
        let rep = prop1_measure(&cfg).unwrap();
        let c = rep.cells.iter().find(|c| c.pair == Some((1, 2))).unwrap();
        assert_eq!(c.mean, 1.0);
        assert_eq!(c.predicted, Some(1.0));
    }

    #[test]
    fn weak_sink_is_a_construction_failure() {
        let c = Prop1Construction {
            sink_gap: 1.0,
            ..Prop1Construction::default()
        };
        let cfg = Prop1Config::construct(2, &c).unwrap();
        assert!(matches!(prop1_measure(&cfg), Err(Error::Construction(_))));
    }

    #[test]
    fn prop1_small_grid() {
        let mut cfg = Prop1Config::construct(3, &Prop1Construction::default()).unwrap();
        cfg.n_c_grid = vec![128, 512, 2048];
        cfg.trials = 60;
        let rep = prop1_measure(&cfg).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures());
        assert_eq!(rep.cells.len(), 3 * 10);
    }

    #[test]
    fn prop2_zero_eps_is_parallel() {
        let cfg = Prop2Config {
            eps_grid: vec![0.0],
            trials: 10,
            ..Prop2Config::default()
        };
        let rep = prop2_measure(&cfg).unwrap();
        assert!(rep.checks[0].passed, "{:?}", rep.checks);
    }

    #[test]
    fn prop2_construction_hits_ratios() {
        let cfg = Prop2Config::default();
        let mut rng = RngStream::new(0, 0);
        for eps in [0.1, 0.01] {
            let vc = prop2_construct(&mut rng, &cfg, eps).unwrap();
            check_r_ratios(&vc.values, eps).unwrap();
            let back = vc.embeddings.matmul_t(&vc.w_v).unwrap();
            assert!(back.max_abs_diff(&vc.values) < 1e-9 * vc.values.max_abs());
        }
    }

    #[test]
    fn prop2_bos_dominated_is_rejected() {
        let cfg = Prop2Config {
            regime: RRegime::BosDominated,
            trials: 3,
            ..Prop2Config::default()
        };
        assert!(matches!(prop2_measure(&cfg), Err(Error::Construction(_))));
    }

    #[test]
    fn prop2_short_sweep() {
        let cfg = Prop2Config {
            trials: 40,
            ..Prop2Config::default()
        };
        let rep = prop2_measure(&cfg).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures());
    }

    #[test]
    fn a4_flat_rows_vanish() {
        let cfg = A4Config {
            flat_rows: true,
            trials: 5,
            ..A4Config::default()
        };
        let rep = a4_extension_measure(&cfg).unwrap();
        assert!(rep.passed(), "{:?}", rep.checks);
    }

    #[test]
    fn a4_decomposition_is_exact() {
        let mut rng = RngStream::new(4, 0);
        let e = rng.normal_mat(6, 8, 3.0);
        let t: Vec<Mat> = (0..2)
            .map(|_| sink_rows(0.1, &random_weights(&mut rng, 6)))
            .collect();
        let w_v: Vec<Mat> = (0..2).map(|_| rng.normal_mat(4, 8, 0.1)).collect();
        let w_out = rng.normal_mat(8, 8, 0.3);
        let dec = a4_decompose(&e, &t, &w_v, &w_out, true).unwrap();
        let sum = dec
            .input
            .add(&dec.mean_part)
            .unwrap()
            .add(&dec.deviation)
            .unwrap();
        assert!(sum.max_abs_diff(&dec.output) < 1e-12);
    }

    #[test]
    fn a4_without_skip_reports_only() {
        let cfg = A4Config {
            skip: false,
            trials: 5,
            ..A4Config::default()
        };
        let rep = a4_extension_measure(&cfg).unwrap();
        assert!(rep.report_only && rep.passed() && rep.fits.len() == 1);
    }

    #[test]
    fn a4_short_sweep() {
        let cfg = A4Config {
            trials: 30,
            ..A4Config::default()
        };
        let rep = a4_extension_measure(&cfg).unwrap();
        assert!(rep.passed(), "{:?} {:?}", rep.failures(), rep.cells);
    }

    #[test]
    fn mgf_small() {
        let rep = mgf_check(&MgfConfig {
            cases: 4,
            draws: 20_000,
            ..MgfConfig::default()
        })
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures());
    }

    #[test]
    fn report_csv_has_a_row_per_cell() {
        let rep = mgf_check(&MgfConfig {
            cases: 3,
            draws: 1000,
            ..MgfConfig::default()
        })
        .unwrap();
        assert_eq!(rep.to_csv().unwrap().lines().count(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn predict_symmetric_and_monotone(seed in 0u64..100_000, t in 0.1f64..3.0) {
            let mut rng = RngStream::new(seed, 0);
            let w = rng.normal_mat(3, 3, 1.0);
            let b = rng.normal_mat(3, 3, 1.0);
            let sigma = b.matmul_t(&b).unwrap();
            let ki = rng.normal_vec(3, 1.0);
            let kj = rng.normal_vec(3, 1.0);
            let a = prop1_predict(&ki, &kj, &w, &sigma).unwrap();
            prop_assert_eq!(a, prop1_predict(&kj, &ki, &w, &sigma).unwrap());
            prop_assert!(a > 0.0 && a <= 1.0);
            let far: Vec<f64> = ki.iter().zip(&kj).map(|(x, y)| y + (1.0 + t) * (x - y)).collect();
            prop_assert!(prop1_predict(&far, &kj, &w, &sigma).unwrap() <= a);
        }
    }
}

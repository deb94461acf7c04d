//! Similarity-alignment guidance: the weighted L1 loss between the
//! cross-attention similarity `S` and the powered text self-attention target
//! `T^gamma`, its reverse-mode gradient with respect to the latent, and the
//! scheduled latent update.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::crossattn::{
    cosine_matrix, layer_queries, resample_operator, row_normalize, CrossParams,
};
use crate::error::{Error, Result};
use crate::numkit::{blur_operator, dot, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothing {
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            sigma: 0.5,
        }
    }
}

/// How the row weight `rho_i` counts positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowWeighting {
    /// `rho_i = i / s` with `i` the 1-based sequence position (BOS is 1).
    #[default]
    Sequence,
    /// `rho_i = i / (s - 1)` with `i` counted from the first content token.
    Content,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Denoising step indices `k = tau - t` at which the latent is updated.
    pub schedule: BTreeSet<usize>,
    pub inner_iters: usize,
    /// `None` computes the similarity from unsmoothed maps.
    pub smoothing: Option<Smoothing>,
    /// Drops the BOS row and the BOS column from the loss.
    pub exclude_bos_row: bool,
    pub exclude_eos: bool,
    pub row_weighting: RowWeighting,
    pub grad_clip: Option<f64>,
    /// Halve the step until the loss strictly decreases.
    pub backtrack: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::preset("anE").expect("built-in preset")
    }
}

impl GuidanceConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            alpha: 0.0,
            gamma: 4.0,
            schedule: BTreeSet::new(),
            inner_iters: 1,
            smoothing: Some(Smoothing::default()),
            exclude_bos_row: true,
            exclude_eos: true,
            row_weighting: RowWeighting::Sequence,
            grad_clip: None,
            backtrack: false,
        };
        match name {
            "tifa" => Ok(Self {
                alpha: 40.0,
                schedule: (1..=25).collect(),
                ..base
            }),
            "anE" | "ane" => Ok(Self {
                alpha: 10.0,
                schedule: [0, 10, 20].into_iter().collect(),
                inner_iters: 20,
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected \"tifa\" or \"anE\")"
            ))),
        }
    }

    /// Guidance disabled: empty schedule.
    pub fn off(&self) -> Self {
        Self {
            schedule: BTreeSet::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self, tau: Option<usize>) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "guidance.alpha = {} must be >= 0",
                self.alpha
            )));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "guidance.gamma = {} must be >= 1",
                self.gamma
            )));
        }
        if self.inner_iters == 0 {
            return Err(Error::Config("guidance.inner_iters must be >= 1".into()));
        }
        if let Some(sm) = &self.smoothing {
            if sm.kernel_size % 2 == 0 || !(sm.sigma > 0.0) {
                return Err(Error::Config(
                    "guidance.smoothing needs an odd kernel_size and sigma > 0".into(),
                ));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("guidance.grad_clip must be > 0".into()));
            }
        }
        if let (Some(tau), Some(&last)) = (tau, self.schedule.iter().next_back()) {
            if last >= tau {
                return Err(Error::Config(format!(
                    "guidance.schedule step {last} is outside [0, {tau})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// `|T^gamma_ij - S_ij|` on included entries, zero elsewhere.
    pub residuals: Mat,
    pub grad_norm: Option<f64>,
    pub step: Option<usize>,
    pub iter: Option<usize>,
}

impl LossReport {
    /// Smallest included residual; gradients are smooth only away from zero.
    pub fn kink_distance(&self, obj: &Objective) -> f64 {
        obj.entries
            .iter()
            .map(|&(i, j)| self.residuals[(i, j)])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Target, row weights and included entries of the loss.
#[derive(Clone, Debug)]
pub struct Objective {
    pub target: Mat,
    pub weights: Vec<f64>,
    pub entries: Vec<(usize, usize)>,
}

impl Objective {
    pub fn new(t: &Mat, cfg: &GuidanceConfig) -> Result<Self> {
        let s = t.rows();
        if t.cols() != s || s == 0 {
            return Err(Error::Argument(format!(
                "T is {}x{}, expected square",
                t.rows(),
                t.cols()
            )));
        }
        let eos = s - 1;
        let first = usize::from(cfg.exclude_bos_row);
        let mut entries = Vec::new();
        for i in first..s {
            if cfg.exclude_eos && i == eos {
                continue;
            }
            for j in first..=i {
                if cfg.exclude_eos && j == eos {
                    continue;
                }
                entries.push((i, j));
            }
        }
        let weights = (0..s)
            .map(|i| match cfg.row_weighting {
                RowWeighting::Sequence => (i + 1) as f64 / s as f64,
                RowWeighting::Content if s > 1 => i as f64 / (s - 1) as f64,
                RowWeighting::Content => 0.0,
            })
            .collect();
        Ok(Self {
            target: t.map(|v| v.powf(cfg.gamma)),
            weights,
            entries,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.target.rows() {
            return Err(Error::Argument("one weight per row required".into()));
        }
        self.weights = weights;
        Ok(self)
    }

    /// Loss report and `dL/dS` (subgradient, `sign(0) = 0`).
    pub fn evaluate(&self, s: &Mat) -> Result<(LossReport, Mat)> {
        if s.shape() != self.target.shape() {
            return Err(Error::Argument(format!(
                "S is {}x{}, T is {}x{}",
                s.rows(),
                s.cols(),
                self.target.rows(),
                self.target.cols()
            )));
        }
        let n = s.rows();
        let mut residuals = Mat::zeros(n, n);
        let mut grad = Mat::zeros(n, n);
        let mut loss = 0.0;
        for &(i, j) in &self.entries {
            let diff = s[(i, j)] - self.target[(i, j)];
            residuals.data_mut()[i * n + j] = diff.abs();
            loss += self.weights[i] * diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad.data_mut()[i * n + j] = self.weights[i] * sign;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "loss",
                detail: format!("L = {loss}"),
            });
        }
        Ok((
            LossReport {
                loss,
                residuals,
                grad_norm: None,
                step: None,
                iter: None,
            },
            grad,
        ))
    }
}

pub fn loss(s: &Mat, t: &Mat, cfg: &GuidanceConfig) -> Result<LossReport> {
    Ok(Objective::new(t, cfg)?.evaluate(s)?.0)
}

struct LayerCache {
    layer: usize,
    resample: Mat,
    /// `K W_c^T` per head, `s x q_dim`.
    kw: Vec<Mat>,
}

/// Differentiable map latent -> `S` through the cross-attention stack.
pub struct SimilarityModel<'a> {
    params: &'a CrossParams,
    blur: Option<Mat>,
    layers: Vec<LayerCache>,
    tokens: usize,
}

/// Intermediates kept for the backward pass.
pub struct Forward {
    maps: Vec<Vec<Mat>>,
    pub a_avg: Mat,
    pub u: Mat,
    pub c: Mat,
    pub s: Mat,
}

impl<'a> SimilarityModel<'a> {
    pub fn new(params: &'a CrossParams, keys: &Mat, smoothing: Option<Smoothing>) -> Result<Self> {
        params.validate()?;
        if keys.cols() != params.key_dim {
            return Err(Error::Shape(format!(
                "keys have dim {}, expected {}",
                keys.cols(),
                params.key_dim
            )));
        }
        let side = (params.m as f64).sqrt().round() as usize;
        let blur = smoothing
            .map(|sm| blur_operator(side, sm.kernel_size, sm.sigma))
            .transpose()?;
        let layers = params
            .layers_at_m()
            .map(|(l, layer)| {
                Ok(LayerCache {
                    layer: l,
                    resample: resample_operator(params.latent_side, layer.grid_side)?,
                    kw: layer
                        .w_c
                        .iter()
                        .map(|w| keys.matmul_t(w))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            blur,
            layers,
            tokens: keys.rows(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    fn head_count(&self) -> usize {
        self.layers.iter().map(|c| c.kw.len()).sum()
    }

    pub fn forward(&self, z: &Mat) -> Result<Forward> {
        let mut a_avg = Mat::zeros(self.params.m, self.tokens);
        let mut maps = Vec::with_capacity(self.layers.len());
        for cache in &self.layers {
            let q = layer_queries(self.params, &self.params.layers[cache.layer], z)?;
            q.ensure_finite("queries")?;
            let mut heads = Vec::with_capacity(cache.kw.len());
            for kw in &cache.kw {
                let logits = q.matmul_t(kw)?;
                logits.ensure_finite("cross-attention logits")?;
                let a = crate::numkit::softmax_rows(&logits, false)?;
                a_avg.add_assign(&a)?;
                heads.push(a);
            }
            maps.push(heads);
        }
        let a_avg = a_avg.scale(1.0 / self.head_count() as f64);
        a_avg.ensure_finite("average")?;
        let u = match &self.blur {
            Some(b) => b.matmul(&a_avg)?,
            None => a_avg.clone(),
        };
        u.ensure_finite("smoothing")?;
        let c = cosine_matrix(&u)?;
        c.ensure_finite("cosine")?;
        let s = row_normalize(&c)?;
        s.ensure_finite("row-normalize")?;
        Ok(Forward {
            maps,
            a_avg,
            u,
            c,
            s,
        })
    }

    /// Pulls `dL/dS` back to `dL/dz`.
    pub fn backward(&self, fwd: &Forward, d_s: &Mat) -> Result<Mat> {
        let n = self.tokens;
        // row normalisation
        let mut d_c = Mat::zeros(n, n);
        for i in 0..n {
            let r: f64 = fwd.c.row(i).iter().sum();
            let inner = dot(d_s.row(i), fwd.s.row(i));
            for k in 0..n {
                d_c.data_mut()[i * n + k] = (d_s[(i, k)] - inner) / r;
            }
        }
        // cosine of columns; the diagonal is constant
        let m = fwd.u.rows();
        let cols: Vec<Vec<f64>> = (0..n).map(|j| fwd.u.col(j)).collect();
        let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
        let hats: Vec<Vec<f64>> = cols
            .iter()
            .zip(&norms)
            .map(|(c, nr)| c.iter().map(|v| v / nr).collect())
            .collect();
        let mut d_u = Mat::zeros(m, n);
        for i in 0..n {
            let mut d_hat = vec![0.0; m];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = d_c[(i, j)] + d_c[(j, i)];
                if w != 0.0 {
                    for (d, h) in d_hat.iter_mut().zip(&hats[j]) {
                        *d += w * h;
                    }
                }
            }
            let proj = dot(&hats[i], &d_hat);
            let col: Vec<f64> = d_hat
                .iter()
                .zip(&hats[i])
                .map(|(d, h)| (d - proj * h) / norms[i])
                .collect();
            d_u.set_col(i, &col);
        }
        let d_avg = match &self.blur {
            Some(b) => b.t_matmul(&d_u)?,
            None => d_u,
        };
        let d_map = d_avg.scale(1.0 / self.head_count() as f64);
        let p = &self.params;
        let mut d_z = Mat::zeros(p.latent_side * p.latent_side, p.channels);
        for (cache, heads) in self.layers.iter().zip(&fwd.maps) {
            let layer = &p.layers[cache.layer];
            let mut d_q = Mat::zeros(layer.n_queries(), layer.q_dim());
            for (a, kw) in heads.iter().zip(&cache.kw) {
                let mut d_logits = Mat::zeros(a.rows(), a.cols());
                for row in 0..a.rows() {
                    let ar = a.row(row);
                    let dr = d_map.row(row);
                    let inner = dot(ar, dr);
                    for (o, (av, dv)) in d_logits.row_mut(row).iter_mut().zip(ar.iter().zip(dr)) {
                        *o = av * (dv - inner);
                    }
                }
                d_q.add_assign(&d_logits.matmul(kw)?)?;
            }
            d_z.add_assign(&cache.resample.t_matmul(&d_q.matmul(&layer.q_proj)?)?)?;
        }
        d_z.ensure_finite("gradient")?;
        Ok(d_z)
    }
}

/// A similarity model paired with a loss objective.
pub struct GuidanceProblem<'a> {
    pub model: SimilarityModel<'a>,
    pub objective: Objective,
}

impl<'a> GuidanceProblem<'a> {
    pub fn new(
        params: &'a CrossParams,
        keys: &Mat,
        t_renorm: &Mat,
        cfg: &GuidanceConfig,
    ) -> Result<Self> {
        let model = SimilarityModel::new(params, keys, cfg.smoothing)?;
        if t_renorm.rows() != model.tokens() {
            return Err(Error::Argument(format!(
                "T has {} tokens, keys have {}",
                t_renorm.rows(),
                model.tokens()
            )));
        }
        Ok(Self {
            model,
            objective: Objective::new(t_renorm, cfg)?,
        })
    }

    pub fn loss_at(&self, z: &Mat) -> Result<f64> {
        let fwd = self.model.forward(z)?;
        Ok(self.objective.evaluate(&fwd.s)?.0.loss)
    }

    pub fn report_at(&self, z: &Mat) -> Result<(LossReport, Forward)> {
        let fwd = self.model.forward(z)?;
        Ok((self.objective.evaluate(&fwd.s)?.0, fwd))
    }
}

/// Loss report and analytic `dL/dz`.
pub fn grad_latent(latent: &Mat, problem: &GuidanceProblem) -> Result<(LossReport, Mat)> {
    latent.ensure_finite("latent")?;
    let fwd = problem.model.forward(latent)?;
    let (mut report, d_s) = problem.objective.evaluate(&fwd.s)?;
    let g = problem.model.backward(&fwd, &d_s)?;
    report.grad_norm = Some(g.frobenius_norm());
    Ok((report, g))
}

#[derive(Clone, Debug)]
pub struct LatentUpdate {
    pub latent: Mat,
    pub reports: Vec<LossReport>,
}

const MAX_HALVINGS: usize = 40;

/// Applies `inner_iters` gradient steps when `step` is scheduled.
pub fn update_latent(
    latent: &Mat,
    cfg: &GuidanceConfig,
    problem: &GuidanceProblem,
    step: usize,
) -> Result<LatentUpdate> {
    let mut z = latent.clone();
    let mut reports = Vec::new();
    if !cfg.schedule.contains(&step) {
        return Ok(LatentUpdate { latent: z, reports });
    }
    for iter in 0..cfg.inner_iters {
        let (mut report, mut g) = grad_latent(&z, problem)?;
        report.step = Some(step);
        report.iter = Some(iter);
        let gn = report.grad_norm.unwrap_or(f64::NAN);
        if !gn.is_finite() {
            return Err(Error::NonFinite {
                stage: "gradient norm",
                detail: format!(
                    "step {step} iter {iter}: loss {} grad norm {gn}",
                    report.loss
                ),
            });
        }
        if let Some(cap) = cfg.grad_clip {
            if gn > cap {
                g = g.scale(cap / gn);
            }
        }
        let before = report.loss;
        reports.push(report);
        if cfg.alpha == 0.0 || gn == 0.0 {
            continue;
        }
        if cfg.backtrack {
            let mut a = cfg.alpha;
            for _ in 0..MAX_HALVINGS {
                let cand = z.sub(&g.scale(a))?;
                if problem.loss_at(&cand)? < before {
                    z = cand;
                    break;
                }
                a *= 0.5;
            }
        } else {
            z.axpy(-cfg.alpha, &g)?;
        }
    }
    Ok(LatentUpdate { latent: z, reports })
}

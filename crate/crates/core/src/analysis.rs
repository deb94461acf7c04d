//! Pair statistics over synthetic prompts: key similarity against map
//! similarity, bound/unbound separation in embeddings and in `T'`, and the
//! BOS attention-mass histogram.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossattn::{compute_maps, similarity_from, CrossGeometry, CrossParams, MapSource};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::numkit::{cosine, dot, solve_spd, Mat, RngStream};
use crate::sandbox::{
    denoise_loop_capturing, seed_setup, synth_instance, Instance, InstanceSpec, SandboxConfig,
};
use crate::stats::{
    histogram, ks_two_sample, mean, pearson, spearman, Binning, Histogram, KsResult,
};
use crate::toyencoder::{TextEncoding, TokenSeq};
use crate::verify::prop1_predict;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Bound,
    Unbound,
    Other,
}

pub fn pair_kind(seq: &TokenSeq, i: usize, j: usize) -> PairKind {
    match (seq.group(i), seq.group(j)) {
        (Some(a), Some(b)) if a == b => PairKind::Bound,
        (Some(_), Some(_)) => PairKind::Unbound,
        _ => PairKind::Other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub instance: usize,
    pub i: usize,
    pub j: usize,
    pub kind: PairKind,
    pub emb_cos: f64,
    /// `T'[j, i]` for `i < j`.
    pub t_prime: f64,
    pub t_renorm: f64,
    pub c: Option<f64>,
    pub step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCorrelation {
    pub step: usize,
    pub pairs: usize,
    pub pearson: f64,
    pub spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub ks: KsResult,
    /// Shared-bin histogram overlap in `[0, 1]`.
    pub overlap: f64,
    pub bound_mean: f64,
    pub unbound_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairStudy {
    pub records: Vec<PairRecord>,
    pub correlations: Vec<StepCorrelation>,
    pub embedding: Option<Separation>,
    pub t_prime: Option<Separation>,
}

fn pair_record(
    instance: usize,
    enc: &TextEncoding,
    emb: &Mat,
    i: usize,
    j: usize,
) -> Result<PairRecord> {
    Ok(PairRecord {
        instance,
        i,
        j,
        kind: pair_kind(&enc.seq, i, j),
        emb_cos: cosine(emb.row(i), emb.row(j))?,
        t_prime: enc.t_prime[(j, i)],
        t_renorm: enc.t_renorm[(j, i)],
        c: None,
        step: None,
    })
}

fn content_pairs(seq: &TokenSeq) -> Vec<(usize, usize)> {
    let n = seq.len();
    (1..n - 1)
        .flat_map(|i| (i + 1..n - 1).map(move |j| (i, j)))
        .collect()
}

fn correlation(step: usize, recs: &[&PairRecord]) -> Result<StepCorrelation> {
    let x: Vec<f64> = recs.iter().map(|r| r.emb_cos).collect();
    let y: Vec<f64> = recs.iter().filter_map(|r| r.c).collect();
    Ok(StepCorrelation {
        step,
        pairs: x.len(),
        pearson: pearson(&x, &y)?,
        spearman: spearman(&x, &y)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub instances: usize,
    pub seed: u64,
    pub sandbox: SandboxConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            sandbox: SandboxConfig::default(),
        }
    }
}

/// Key cosine against raw-map `C` for every content pair at denoising steps
/// `1`, `tau/2` and `tau` (1-based, unguided loop). Correlations are
/// reported only.
pub fn key_map_study(cfg: &StudyConfig) -> Result<PairStudy> {
    if cfg.instances < 100 {
        return Err(Error::Statistics(format!(
            "key/map study needs >= 100 instances, got {}",
            cfg.instances
        )));
    }
    let tau = cfg.sandbox.tau;
    let steps = [0, tau / 2, tau];
    let guidance = GuidanceConfig {
        smoothing: None,
        ..GuidanceConfig::default().off()
    };
    let per_instance: Vec<Vec<PairRecord>> = (0..cfg.instances)
        .into_par_iter()
        .map(|n| {
            let setup = seed_setup(&cfg.sandbox, cfg.seed.wrapping_add(n as u64))?;
            let enc = &setup.instance.encoding;
            let state = denoise_loop_capturing(
                setup.init,
                enc,
                &guidance,
                &setup.denoiser,
                &setup.cross,
                &steps,
            )?;
            let mut out = Vec::new();
            for snap in &state.snapshots {
                for (i, j) in content_pairs(&enc.seq) {
                    let mut r = pair_record(n, enc, &enc.k, i, j)?;
                    r.c = Some(snap.c[(i, j)]);
                    r.step = Some(snap.step + 1);
                    out.push(r);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let records: Vec<PairRecord> = per_instance.into_iter().flatten().collect();
    let mut correlations = Vec::new();
    for k in steps {
        let recs: Vec<&PairRecord> = records.iter().filter(|r| r.step == Some(k + 1)).collect();
        correlations.push(correlation(k + 1, &recs)?);
    }
    Ok(PairStudy {
        records,
        correlations,
        embedding: None,
        t_prime: None,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryNoise {
    #[default]
    Gaussian,
    /// Cauchy entries: far outside the Gaussian-query regime.
    HeavyTailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seed: u64,
    pub points: usize,
    pub cross: CrossGeometry,
    pub key_norm: f64,
    pub sink: bool,
    /// `b^T W_c k_sink` for every head.
    pub sink_gap: f64,
    pub queries: QueryNoise,
    pub extra_tokens: usize,
    /// Sweep end; `pi / 2` takes the pair from identical to orthogonal.
    pub theta_max: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            points: 50,
            cross: CrossGeometry {
                latent_side: 16,
                // one map at full resolution; the coarse layer is not averaged
                layer_sides: [16, 8],
                num_heads: 1,
                head_dim: 8,
                key_dim: 16,
                ..CrossGeometry::default()
            },
            key_norm: 0.7,
            sink: true,
            sink_gap: 8.0,
            queries: QueryNoise::Gaussian,
            extra_tokens: 2,
            theta_max: std::f64::consts::FRAC_PI_2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub key_cos: f64,
    pub c: f64,
    /// Head-averaged closed-form prediction.
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub spearman: f64,
    pub pearson: f64,
    pub spearman_predicted: f64,
    /// Largest `|C - predicted|` over the sweep.
    pub max_abs_dev: f64,
    /// Mean over queries and sweep points of non-BOS mass / BOS mass.
    pub mean_eps: f64,
    /// Sink present, Gaussian queries and a single averaged map: the
    /// setting the closed-form prediction describes.
    pub in_regime: bool,
}

/// Unit key that no head sees through the random part of its queries:
/// `P^T W_c^h k = 0` for every layer and head. The sink logit is then the
/// same for every query.
fn quiet_sink_key(params: &CrossParams, rng: &mut RngStream) -> Result<Vec<f64>> {
    let mut rows = Vec::new();
    for (_, layer) in params.layers_at_m() {
        for w in &layer.w_c {
            let pw = layer.q_proj.t_matmul(w)?;
            rows.extend((0..pw.rows()).map(|r| pw.row(r).to_vec()));
        }
    }
    let g = Mat::from_rows(&rows)?;
    if g.rows() >= g.cols() {
        return Err(Error::Construction(format!(
            "a query-independent sink key needs key_dim > {}, got {}",
            g.rows(),
            g.cols()
        )));
    }
    let k = project_out(&rng.unit_vec(g.cols()), &g)?;
    if dot(&k, &k) < 1e-16 {
        return Err(Error::Degenerate("sink key projection vanished".into()));
    }
    Ok(rescale(k, 1.0))
}

/// Removes from `v` its component in the row span of `basis`.
fn project_out(v: &[f64], basis: &Mat) -> Result<Vec<f64>> {
    let coeff = solve_spd(&basis.matmul_t(basis)?, &basis.matvec(v)?)?;
    let back = basis.transpose().matvec(&coeff)?;
    Ok(v.iter().zip(&back).map(|(a, b)| a - b).collect())
}

fn rescale(v: Vec<f64>, norm: f64) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x * norm / n).collect()
}

/// Query offset `b` with `b^T W_c^h k_sink = gap` for every head `h`.
fn sink_offset(layer_w: &[Mat], k_sink: &[f64], gap: f64) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = layer_w
        .iter()
        .map(|w| w.matvec(k_sink))
        .collect::<Result<_>>()?;
    let g = Mat::from_rows(&rows)?;
    let coeff = solve_spd(&g.matmul_t(&g)?, &vec![gap; rows.len()])?;
    g.transpose().matvec(&coeff)
}

/// Rotates token 2's key away from token 1's over `[0, theta_max]` and
/// records the raw-map similarity `C_12` with the queries held fixed.
pub fn key_map_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    if cfg.points < 3 {
        return Err(Error::Argument("sweep needs >= 3 points".into()));
    }
    if !(cfg.theta_max > 0.0 && cfg.theta_max <= std::f64::consts::PI) {
        return Err(Error::Argument("theta_max must lie in (0, pi]".into()));
    }
    let mut rng = RngStream::new(cfg.seed, 0x51);
    let mut params = CrossParams::random(&mut rng, &cfg.cross);
    let kd = cfg.cross.key_dim;
    let k_sink = if cfg.sink {
        quiet_sink_key(&params, &mut rng)?
    } else {
        rng.unit_vec(kd)
    };
    if cfg.sink {
        for layer in &mut params.layers {
            layer.q_bias = sink_offset(&layer.w_c, &k_sink, cfg.sink_gap)?;
        }
    }
    let p = cfg.cross.latent_side * cfg.cross.latent_side;
    let z = match cfg.queries {
        QueryNoise::Gaussian => rng.normal_mat(p, cfg.cross.channels, 1.0),
        QueryNoise::HeavyTailed => Mat::from_fn(p, cfg.cross.channels, |_, _| {
            rng.standard_normal() / rng.standard_normal()
        }),
    };
    // content keys see no offset: b^T W_c^h k = 0 for every head, so the
    // content logits are pure zero-mean query noise
    let offsets: Vec<Vec<f64>> = if cfg.sink {
        params
            .layers
            .iter()
            .flat_map(|l| l.w_c.iter().map(|w| w.transpose().matvec(&l.q_bias)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let content = |rng: &mut RngStream| -> Result<Vec<f64>> {
        let v = rng.unit_vec(kd);
        let v = if offsets.is_empty() {
            v
        } else {
            project_out(&v, &Mat::from_rows(&offsets)?)?
        };
        Ok(rescale(v, cfg.key_norm))
    };
    let k_i = content(&mut rng)?;
    let k_perp = content(&mut rng)?;
    let proj = dot(&k_perp, &k_i) / dot(&k_i, &k_i);
    let k_perp = rescale(
        k_perp.iter().zip(&k_i).map(|(a, b)| a - proj * b).collect(),
        cfg.key_norm,
    );
    let extra: Vec<Vec<f64>> = (0..cfg.extra_tokens)
        .map(|_| content(&mut rng))
        .collect::<Result<_>>()?;

    // query covariance of the (single-resolution) layers: P P^T
    let at_m: Vec<_> = params.layers_at_m().map(|(_, l)| l).collect();
    let sigmas: Vec<Mat> = at_m
        .iter()
        .map(|l| l.q_proj.matmul_t(&l.q_proj))
        .collect::<Result<_>>()?;
    let maps = at_m.iter().map(|l| l.w_c.len()).sum::<usize>();
    let mut points = Vec::with_capacity(cfg.points);
    let mut eps_sum = 0.0;
    for n in 0..cfg.points {
        let theta = cfg.theta_max * n as f64 / (cfg.points - 1) as f64;
        let k_j: Vec<f64> = k_i
            .iter()
            .zip(&k_perp)
            .map(|(a, b)| theta.cos() * a + theta.sin() * b)
            .collect();
        let mut rows = vec![k_sink.clone(), k_i.clone(), k_j.clone()];
        rows.extend(extra.iter().cloned());
        let keys = Mat::from_rows(&rows)?;
        let st = similarity_from(compute_maps(&params, &z, &keys)?, MapSource::Raw)?;
        let a = &st.a_avg;
        eps_sum += (0..a.rows())
            .map(|r| (1.0 - a[(r, 0)]) / a[(r, 0)])
            .sum::<f64>()
            / a.rows() as f64;
        let c = st.c.as_ref().map(|c| c[(1, 2)]).unwrap_or(f64::NAN);
        let mut pred = 0.0;
        let mut heads = 0;
        for (layer, sigma) in at_m.iter().zip(&sigmas) {
            for w in &layer.w_c {
                pred += prop1_predict(&k_i, &k_j, w, sigma)?;
                heads += 1;
            }
        }
        points.push(SweepPoint {
            theta,
            key_cos: cosine(&k_i, &k_j)?,
            c,
            predicted: pred / heads as f64,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.key_cos).collect();
    let y: Vec<f64> = points.iter().map(|p| p.c).collect();
    let yp: Vec<f64> = points.iter().map(|p| p.predicted).collect();
    Ok(SweepResult {
        spearman: spearman(&x, &y)?,
        pearson: pearson(&x, &y)?,
        spearman_predicted: spearman(&yp, &y)?,
        mean_eps: eps_sum / cfg.points as f64,
        max_abs_dev: points
            .iter()
            .map(|p| (p.c - p.predicted).abs())
            .fold(0.0, f64::max),
        in_regime: cfg.sink && cfg.queries == QueryNoise::Gaussian && maps == 1,
        points,
    })
}

fn overlap(a: &[f64], b: &[f64]) -> Result<f64> {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let h = histogram(&pooled, Binning::FreedmanDiaconis)?;
    let lo = h.edges[0];
    let hi = *h.edges.last().unwrap_or(&lo);
    if !(hi > lo) {
        return Ok(1.0);
    }
    let fixed = Binning::Fixed {
        bins: h.counts.len(),
        lo,
        hi,
    };
    let (ha, hb) = (histogram(a, fixed)?, histogram(b, fixed)?);
    Ok(ha
        .counts
        .iter()
        .zip(&hb.counts)
        .map(|(x, y)| (*x as f64 / a.len() as f64).min(*y as f64 / b.len() as f64))
        .sum())
}

fn separation(bound: &[f64], unbound: &[f64]) -> Result<Separation> {
    Ok(Separation {
        ks: ks_two_sample(bound, unbound)?,
        overlap: overlap(bound, unbound)?,
        bound_mean: mean(bound),
        unbound_mean: mean(unbound),
    })
}

pub const MIN_PAIRS_PER_CLASS: usize = 30;

/// Bound vs unbound distributions of initial-embedding cosine and of `T'`.
pub fn separation_study(instances: &[Instance]) -> Result<PairStudy> {
    let mut records = Vec::new();
    for (n, inst) in instances.iter().enumerate() {
        let enc = &inst.encoding;
        for (i, j) in content_pairs(&enc.seq) {
            let r = pair_record(n, enc, &inst.embeddings, i, j)?;
            if r.kind != PairKind::Other {
                records.push(r);
            }
        }
    }
    let pick = |kind: PairKind, f: fn(&PairRecord) -> f64| -> Vec<f64> {
        records.iter().filter(|r| r.kind == kind).map(f).collect()
    };
    let (be, ue) = (
        pick(PairKind::Bound, |r| r.emb_cos),
        pick(PairKind::Unbound, |r| r.emb_cos),
    );
    if be.len() < MIN_PAIRS_PER_CLASS || ue.len() < MIN_PAIRS_PER_CLASS {
        return Err(Error::Statistics(format!(
            "need >= {MIN_PAIRS_PER_CLASS} pairs per class, got {} bound and {} unbound",
            be.len(),
            ue.len()
        )));
    }
    let (bt, ut) = (
        pick(PairKind::Bound, |r| r.t_prime),
        pick(PairKind::Unbound, |r| r.t_prime),
    );
    Ok(PairStudy {
        embedding: Some(separation(&be, &ue)?),
        t_prime: Some(separation(&bt, &ut)?),
        records,
        correlations: Vec::new(),
    })
}

/// Instances from consecutive seeds of one generator spec.
pub fn synth_instances(spec: &InstanceSpec, seed: u64, count: usize) -> Result<Vec<Instance>> {
    (0..count)
        .into_par_iter()
        .map(|n| synth_instance(&mut RngStream::new(seed.wrapping_add(n as u64), 1), spec))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkHistogram {
    pub bos: Histogram,
    pub non_bos: Histogram,
    pub bos_mean: f64,
    pub non_bos_mean: f64,
    pub ratio: f64,
}

/// Per attention row `i >= 2` of every head: mass on BOS and the mean mass
/// on the other tokens `2..=i`.
pub fn sink_masses(encodings: &[&TextEncoding]) -> (Vec<f64>, Vec<f64>) {
    let (mut bos, mut rest) = (Vec::new(), Vec::new());
    for enc in encodings {
        for t in &enc.t_stack {
            for i in 1..t.rows() {
                bos.push(t[(i, 0)]);
                rest.push(t.row(i)[1..=i].iter().sum::<f64>() / i as f64);
            }
        }
    }
    (bos, rest)
}

pub fn sink_histogram(encodings: &[&TextEncoding], binning: Binning) -> Result<SinkHistogram> {
    let (bos, rest) = sink_masses(encodings);
    let (bm, rm) = (mean(&bos), mean(&rest));
    Ok(SinkHistogram {
        bos: histogram(&bos, binning)?,
        non_bos: histogram(&rest, binning)?,
        bos_mean: bm,
        non_bos_mean: rm,
        ratio: bm / rm,
    })
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

fn f(x: f64) -> String {
    format!("{x:.17e}")
}

fn kind_str(k: PairKind) -> String {
    match k {
        PairKind::Bound => "bound",
        PairKind::Unbound => "unbound",
        PairKind::Other => "other",
    }
    .to_string()
}

/// Key cosine against `C` at one step.
pub fn fig2a_csv(study: &PairStudy, step: usize) -> Result<String> {
    csv_string(
        &["instance", "i", "j", "kind", "emb_cos", "C"],
        study
            .records
            .iter()
            .filter(|r| r.step == Some(step))
            .map(|r| {
                vec![
                    r.instance.to_string(),
                    r.i.to_string(),
                    r.j.to_string(),
                    kind_str(r.kind),
                    f(r.emb_cos),
                    f(r.c.unwrap_or(f64::NAN)),
                ]
            }),
    )
}

pub fn sweep_csv(sweep: &SweepResult) -> Result<String> {
    csv_string(
        &["theta", "key_cos", "C", "predicted"],
        sweep
            .points
            .iter()
            .map(|p| vec![f(p.theta), f(p.key_cos), f(p.c), f(p.predicted)]),
    )
}

/// Key cosine against `C` at every captured step.
pub fn fig4_csv(study: &PairStudy) -> Result<String> {
    csv_string(
        &["step", "instance", "i", "j", "emb_cos", "C"],
        study.records.iter().map(|r| {
            vec![
                r.step.map(|s| s.to_string()).unwrap_or_default(),
                r.instance.to_string(),
                r.i.to_string(),
                r.j.to_string(),
                f(r.emb_cos),
                f(r.c.unwrap_or(f64::NAN)),
            ]
        }),
    )
}

/// Embedding cosine by pair type.
pub fn fig2b_csv(study: &PairStudy) -> Result<String> {
    csv_string(
        &["instance", "i", "j", "kind", "emb_cos"],
        study.records.iter().map(|r| {
            vec![
                r.instance.to_string(),
                r.i.to_string(),
                r.j.to_string(),
                kind_str(r.kind),
                f(r.emb_cos),
            ]
        }),
    )
}

/// `T'` by pair type.
pub fn fig5a_csv(study: &PairStudy) -> Result<String> {
    csv_string(
        &["instance", "i", "j", "kind", "t_prime", "t_renorm"],
        study.records.iter().map(|r| {
            vec![
                r.instance.to_string(),
                r.i.to_string(),
                r.j.to_string(),
                kind_str(r.kind),
                f(r.t_prime),
                f(r.t_renorm),
            ]
        }),
    )
}

pub fn fig5b_csv(h: &SinkHistogram) -> Result<String> {
    let rows = [("bos", &h.bos), ("non_bos", &h.non_bos)]
        .into_iter()
        .flat_map(|(name, hist)| {
            hist.counts.iter().enumerate().map(move |(b, c)| {
                vec![
                    name.to_string(),
                    f(hist.edges[b]),
                    f(hist.edges[b + 1]),
                    c.to_string(),
                ]
            })
        })
        .collect::<Vec<_>>();
    csv_string(&["series", "bin_lo", "bin_hi", "count"], rows)
}

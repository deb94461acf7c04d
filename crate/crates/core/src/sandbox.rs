//! Toy denoising loop `z_{t-1} = z_t - D(z_t; k)` with guidance updates
//! injected at scheduled steps, plus synthetic prompts with planted
//! attribute/object bindings.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossattn::{mean_over_pairs, CrossGeometry, CrossParams};
use crate::error::{Error, Result};
use crate::guidance::{update_latent, GuidanceConfig, GuidanceProblem};
use crate::numkit::{Mat, RngStream};
use crate::stats;
use crate::toyencoder::{encode, EncoderParams, TextEncoding, TokenSeq};

const DIVERGENCE_NORM: f64 = 1e6;

/// `BOS a1 o1 [fillers] a2 o2 ... EOS`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupLayout {
    pub groups: usize,
    pub fillers: usize,
}

impl GroupLayout {
    pub fn len(&self) -> usize {
        2 + 2 * self.groups + self.fillers * self.groups.saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn seq(&self) -> Result<TokenSeq> {
        if self.groups < 2 {
            return Err(Error::Construction(
                "need >= 2 attribute/object groups for an unbound pair".into(),
            ));
        }
        if self.len() < 6 {
            return Err(Error::Construction(format!(
                "sequence of {} tokens is too small (need >= 6)",
                self.len()
            )));
        }
        let mut labels = vec![None];
        for g in 0..self.groups {
            if g > 0 {
                labels.extend(std::iter::repeat_n(None, self.fillers));
            }
            labels.push(Some(g as u32));
            labels.push(Some(g as u32));
        }
        labels.push(None);
        TokenSeq::with_groups(labels)
    }

    /// Positions of `(attribute, object)` per group.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.groups)
            .map(|g| {
                let a = 1 + g * (2 + self.fillers);
                (a, a + 1)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceSpec {
    pub layout: GroupLayout,
    /// Plant the binding; `false` gives i.i.d. embeddings.
    pub planted: bool,
    /// Embeddings are `[x; y]` with `x, y` of this size.
    pub half_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Norm of the shared group direction.
    pub plant_strength: f64,
    /// Per-coordinate embedding noise.
    pub noise: f64,
    /// Weight of the `x -> y` block in every `W_en`.
    pub score_beta: f64,
    pub score_noise: f64,
    pub value_scale: f64,
    pub sink_bias: f64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            layout: GroupLayout {
                groups: 2,
                fillers: 1,
            },
            planted: true,
            half_dim: 8,
            num_heads: 2,
            num_layers: 2,
            plant_strength: 1.0,
            noise: 0.3,
            score_beta: 4.0,
            score_noise: 0.05,
            value_scale: 0.05,
            sink_bias: 6.0,
        }
    }
}

impl InstanceSpec {
    pub fn d_model(&self) -> usize {
        2 * self.half_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.half_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config("instance dims must be >= 1".into()));
        }
        if !self.d_model().is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "instance: 2*half_dim = {} is not divisible by num_heads = {}",
                self.d_model(),
                self.num_heads
            )));
        }
        for (name, v) in [
            ("plant_strength", self.plant_strength),
            ("noise", self.noise),
            ("score_beta", self.score_beta),
            ("score_noise", self.score_noise),
            ("value_scale", self.value_scale),
            ("sink_bias", self.sink_bias),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "instance.{name} = {v} must be finite and >= 0"
                )));
            }
        }
        self.layout.seq().map(|_| ())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Instance {
    pub embeddings: Mat,
    pub encoder: EncoderParams,
    pub encoding: TextEncoding,
}

/// Builds embeddings and encoder weights so that each object row of `T`
/// puts high mass on its own attribute, while raw embedding cosines stay
/// unseparated: the group direction sits in the `x` half of the object and
/// the `y` half of the attribute, and `W_en` couples `x` to `y`.
pub fn synth_instance(rng: &mut RngStream, spec: &InstanceSpec) -> Result<Instance> {
    spec.validate()?;
    let seq = spec.layout.seq()?;
    let (h, d, s) = (spec.half_dim, spec.d_model(), seq.len());
    let mut e = rng.normal_mat(s, d, spec.noise);
    if spec.planted {
        for (a, o) in spec.layout.pairs() {
            let u: Vec<f64> = rng
                .unit_vec(h)
                .into_iter()
                .map(|v| v * spec.plant_strength)
                .collect();
            for c in 0..h {
                e[(o, c)] += u[c];
                e[(a, h + c)] += u[c];
            }
        }
    }
    let head_dim = d / spec.num_heads;
    let mut enc = EncoderParams::zeros(spec.num_layers, spec.num_heads, head_dim);
    enc.sink_bias = spec.sink_bias;
    for layer in &mut enc.layers {
        for head in &mut layer.heads {
            let mut w = rng.normal_mat(d, d, spec.score_noise);
            for c in 0..h {
                w[(c, h + c)] += spec.score_beta;
            }
            head.w_en = w;
            head.w_v = rng.normal_mat(head_dim, d, spec.value_scale);
        }
        layer.w_out = rng.normal_mat(d, d, 1.0 / (d as f64).sqrt());
    }
    let encoding = encode(&enc, &e, &seq)?;
    Ok(Instance {
        embeddings: e,
        encoder: enc,
        encoding,
    })
}

/// Entries `T[i, j]` (`j < i`) split by binding, restricted to rows that
/// contain both kinds so that row length does not confound the comparison.
pub fn row_matched_entries(t: &Mat, seq: &TokenSeq) -> (Vec<f64>, Vec<f64>) {
    let (mut bound, mut unbound) = (Vec::new(), Vec::new());
    for i in 0..seq.len() {
        let Some(gi) = seq.group(i) else { continue };
        let mut b = Vec::new();
        let mut u = Vec::new();
        for j in 1..i {
            match seq.group(j) {
                Some(gj) if gj == gi => b.push(t[(i, j)]),
                Some(_) => u.push(t[(i, j)]),
                None => {}
            }
        }
        if !b.is_empty() && !u.is_empty() {
            bound.extend(b);
            unbound.extend(u);
        }
    }
    (bound, unbound)
}

/// `D(z)_a = amp * (W_z z_a) * (1 + tanh(W_ctx ctx_a) / 2)` with the
/// cross-attention context `ctx = A_avg K`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyDenoiser {
    pub w_z: Mat,
    pub w_ctx: Mat,
    pub amp: f64,
    pub seed: u64,
}

impl ToyDenoiser {
    pub fn random(seed: u64, channels: usize, key_dim: usize, amp: f64) -> Self {
        let mut rng = RngStream::new(seed, 0xD0);
        let mut w_z = rng.normal_mat(channels, channels, 0.5 / (channels as f64).sqrt());
        for c in 0..channels {
            w_z[(c, c)] += 1.0;
        }
        Self {
            w_z,
            w_ctx: rng.normal_mat(channels, key_dim, 1.0 / (key_dim as f64).sqrt()),
            amp,
            seed,
        }
    }

    /// `c` with `||D(z)|| <= c ||z||` for every input.
    pub fn gain_bound(&self) -> f64 {
        1.5 * self.amp.abs() * self.w_z.frobenius_norm()
    }

    pub fn apply(&self, z: &Mat, ctx: &Mat) -> Result<Mat> {
        if ctx.rows() != z.rows() {
            return Err(Error::Shape(format!(
                "context has {} positions, latent has {}",
                ctx.rows(),
                z.rows()
            )));
        }
        let lin = z.matmul_t(&self.w_z)?;
        let gate = ctx.matmul_t(&self.w_ctx)?;
        let mut out = lin;
        for (o, g) in out.data_mut().iter_mut().zip(gate.data()) {
            *o *= self.amp * (1.0 + 0.5 * g.tanh());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Step index `k = tau - t`; the final snapshot has `k = tau`.
    pub step: usize,
    pub t: usize,
    /// Loss before any guidance update at this step.
    pub loss_before: f64,
    pub loss: f64,
    pub c_bound: f64,
    pub c_unbound: f64,
    pub inner_losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

/// `C` captured at a requested step (before any update at that step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CSnapshot {
    pub step: usize,
    pub c: Mat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Mat,
    pub t: usize,
    pub tau: usize,
    pub trace: Vec<TraceEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<CSnapshot>,
}

impl LatentState {
    pub fn new(z: Mat, tau: usize) -> Self {
        Self {
            z,
            t: tau,
            tau,
            trace: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    pub fn final_entry(&self) -> Option<&TraceEntry> {
        self.trace.last()
    }
}

/// A loop that stopped early, with the trace up to the failure.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub state: Box<LatentState>,
}

impl fmt::Display for Aborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "denoising aborted at t = {}: {}",
            self.state.t, self.error
        )
    }
}

impl std::error::Error for Aborted {}

impl From<Aborted> for Error {
    fn from(a: Aborted) -> Self {
        a.error
    }
}

pub fn denoise_loop(
    init: LatentState,
    enc: &TextEncoding,
    cfg: &GuidanceConfig,
    denoiser: &ToyDenoiser,
    cross: &CrossParams,
) -> std::result::Result<LatentState, Aborted> {
    denoise_loop_capturing(init, enc, cfg, denoiser, cross, &[])
}

/// [`denoise_loop`] that also stores `C` at the listed steps.
pub fn denoise_loop_capturing(
    init: LatentState,
    enc: &TextEncoding,
    cfg: &GuidanceConfig,
    denoiser: &ToyDenoiser,
    cross: &CrossParams,
    capture: &[usize],
) -> std::result::Result<LatentState, Aborted> {
    let mut state = init;
    let fail = |error: Error, state: LatentState| Aborted {
        error,
        state: Box::new(state),
    };
    if state.t != state.tau {
        return Err(fail(
            Error::Argument(format!("loop must start at t = tau = {}", state.tau)),
            state,
        ));
    }
    if let Err(e) = cfg.validate(Some(state.tau)) {
        return Err(fail(e, state));
    }
    let problem = match GuidanceProblem::new(cross, &enc.k, &enc.t_renorm, cfg) {
        Ok(p) => p,
        Err(e) => return Err(fail(e, state)),
    };
    let bound = enc.seq.bound_pairs();
    let unbound = enc.seq.unbound_pairs();
    let snapshot = |z: &Mat| -> Result<(f64, crate::guidance::Forward)> {
        let (rep, fwd) = problem.report_at(z)?;
        Ok((rep.loss, fwd))
    };
    while state.t > 0 {
        let step = state.tau - state.t;
        let result = (|| -> Result<(TraceEntry, Mat, Option<Mat>)> {
            let (loss_before, fwd0) = snapshot(&state.z)?;
            let captured = capture.contains(&step).then(|| fwd0.c.clone());
            let up = update_latent(&state.z, cfg, &problem, step)?;
            let (loss, fwd) = if up.reports.is_empty() {
                (loss_before, fwd0)
            } else {
                snapshot(&up.latent)?
            };
            let entry = TraceEntry {
                step,
                t: state.t,
                loss_before,
                loss,
                c_bound: mean_over_pairs(&fwd.c, &bound),
                c_unbound: mean_over_pairs(&fwd.c, &unbound),
                inner_losses: up.reports.iter().map(|r| r.loss).collect(),
                grad_norms: up.reports.iter().filter_map(|r| r.grad_norm).collect(),
            };
            let ctx = fwd.a_avg.matmul(&enc.k)?;
            let z = up.latent.sub(&denoiser.apply(&up.latent, &ctx)?)?;
            Ok((entry, z, captured))
        })();
        match result {
            Ok((entry, z, captured)) => {
                state.trace.push(entry);
                if let Some(c) = captured {
                    state.snapshots.push(CSnapshot { step, c });
                }
                let norm = z.frobenius_norm();
                if !(norm <= DIVERGENCE_NORM) {
                    return Err(fail(Error::Divergence { step, norm }, state));
                }
                state.z = z;
                state.t -= 1;
            }
            Err(e) => return Err(fail(e, state)),
        }
    }
    match snapshot(&state.z) {
        Ok((loss, fwd)) => {
            if capture.contains(&state.tau) {
                state.snapshots.push(CSnapshot {
                    step: state.tau,
                    c: fwd.c.clone(),
                });
            }
            state.trace.push(TraceEntry {
                step: state.tau,
                t: 0,
                loss_before: loss,
                loss,
                c_bound: mean_over_pairs(&fwd.c, &bound),
                c_unbound: mean_over_pairs(&fwd.c, &unbound),
                inner_losses: Vec::new(),
                grad_norms: Vec::new(),
            })
        }
        Err(e) => return Err(fail(e, state)),
    }
    Ok(state)
}

/// Step-size factor applied to the named presets in the toy sandbox; the
/// toy loss gradients are about an order of magnitude smaller.
pub const TOY_ALPHA_SCALE: f64 = 10.0;

pub fn toy_preset(name: &str) -> Result<GuidanceConfig> {
    let mut g = GuidanceConfig::preset(name)?;
    g.alpha *= TOY_ALPHA_SCALE;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SandboxConfig {
    pub instance: InstanceSpec,
    pub cross: CrossGeometry,
    pub tau: usize,
    pub denoiser_amp: f64,
    pub latent_scale: f64,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            instance: InstanceSpec::default(),
            cross: CrossGeometry {
                key_dim: 16,
                ..CrossGeometry::default()
            },
            tau: 50,
            denoiser_amp: 0.01,
            latent_scale: 1.0,
        }
    }
}

impl SandboxConfig {
    pub fn validate(&self) -> Result<()> {
        self.instance.validate()?;
        if self.cross.key_dim != self.instance.d_model() {
            return Err(Error::Config(format!(
                "cross.key_dim = {} must equal the encoder width {}",
                self.cross.key_dim,
                self.instance.d_model()
            )));
        }
        if self.tau == 0 {
            return Err(Error::Config("sandbox.tau must be >= 1".into()));
        }
        if !(self.denoiser_amp >= 0.0 && self.denoiser_amp.is_finite()) {
            return Err(Error::Config(
                "sandbox.denoiser_amp must be finite and >= 0".into(),
            ));
        }
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite()) {
            return Err(Error::Config("sandbox.latent_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Everything a seed needs, derived from independent streams of the seed.
pub struct SeedSetup {
    pub instance: Instance,
    pub cross: CrossParams,
    pub denoiser: ToyDenoiser,
    pub init: LatentState,
}

pub fn seed_setup(cfg: &SandboxConfig, seed: u64) -> Result<SeedSetup> {
    cfg.validate()?;
    let instance = synth_instance(&mut RngStream::new(seed, 1), &cfg.instance)?;
    let cross = CrossParams::random(&mut RngStream::new(seed, 2), &cfg.cross);
    let denoiser = ToyDenoiser::random(
        seed,
        cfg.cross.channels,
        cfg.cross.key_dim,
        cfg.denoiser_amp,
    );
    let p = cfg.cross.latent_side * cfg.cross.latent_side;
    let z = RngStream::new(seed, 4).normal_mat(p, cfg.cross.channels, cfg.latent_scale);
    Ok(SeedSetup {
        instance,
        cross,
        denoiser,
        init: LatentState::new(z, cfg.tau),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub state: LatentState,
}

impl SeedRun {
    /// Loss before the first scheduled update and after the last one.
    pub fn scheduled_losses(&self, cfg: &GuidanceConfig) -> Option<(f64, f64)> {
        let first = *cfg.schedule.iter().next()?;
        let last = *cfg.schedule.iter().next_back()?;
        let at = |k: usize| self.state.trace.iter().find(|e| e.step == k);
        Some((at(first)?.loss_before, at(last)?.loss))
    }

    pub fn separated(&self) -> bool {
        self.state
            .final_entry()
            .is_some_and(|e| e.c_bound > e.c_unbound)
    }

    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.state.trace {
            #[derive(Serialize)]
            struct Line<'a> {
                seed: u64,
                #[serde(flatten)]
                entry: &'a TraceEntry,
            }
            out.push_str(&serde_json::to_string(&Line {
                seed: self.seed,
                entry: e,
            })?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn run_seed(cfg: &SandboxConfig, guidance: &GuidanceConfig, seed: u64) -> Result<SeedRun> {
    let setup = seed_setup(cfg, seed)?;
    let state = denoise_loop(
        setup.init,
        &setup.instance.encoding,
        guidance,
        &setup.denoiser,
        &setup.cross,
    )?;
    Ok(SeedRun { seed, state })
}

/// Runs seeds concurrently; results come back in seed order.
pub fn run_seeds(
    cfg: &SandboxConfig,
    guidance: &GuidanceConfig,
    seeds: &[u64],
) -> Result<Vec<SeedRun>> {
    seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, guidance, seed))
        .collect()
}

pub fn summary_csv(runs: &[SeedRun]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "step", "loss", "C_bound_mean", "C_unbound_mean"])
        .map_err(|e| Error::Config(e.to_string()))?;
    for run in runs {
        for e in &run.state.trace {
            w.write_record([
                run.seed.to_string(),
                e.step.to_string(),
                format!("{:.17e}", e.loss),
                format!("{:.17e}", e.c_bound),
                format!("{:.17e}", e.c_unbound),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EfficacySummary {
    pub seeds: usize,
    pub loss_decreased: usize,
    pub separated_on: usize,
    pub separated_off: usize,
    /// One-sided two-proportion test, guidance on > off.
    pub p_value: f64,
}

impl EfficacySummary {
    pub fn from_runs(cfg: &GuidanceConfig, on: &[SeedRun], off: &[SeedRun]) -> Self {
        let loss_decreased = on
            .iter()
            .filter(|r| r.scheduled_losses(cfg).is_some_and(|(a, b)| b < a))
            .count();
        let separated_on = on.iter().filter(|r| r.separated()).count();
        let separated_off = off.iter().filter(|r| r.separated()).count();
        Self {
            seeds: on.len(),
            loss_decreased,
            separated_on,
            separated_off,
            p_value: stats::two_proportion_p(separated_on, on.len(), separated_off, off.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::ks_two_sample;
    use proptest::prelude::*;

    #[test]
    fn layout_positions() {
        let l = GroupLayout {
            groups: 2,
            fillers: 1,
        };
        assert_eq!(l.len(), 7);
        assert_eq!(l.pairs(), vec![(1, 2), (4, 5)]);
        let seq = l.seq().unwrap();
        assert_eq!(seq.bound_pairs(), vec![(1, 2), (4, 5)]);
        assert_eq!(seq.unbound_pairs().len(), 4);
        assert!(GroupLayout {
            groups: 1,
            fillers: 3
        }
        .seq()
        .is_err());
        assert_eq!(
            GroupLayout {
                groups: 2,
                fillers: 0
            }
            .len(),
            6
        );
    }

    #[test]
    fn too_small_spec_is_rejected() {
        let spec = InstanceSpec {
            layout: GroupLayout {
                groups: 1,
                fillers: 0,
            },
            ..InstanceSpec::default()
        };
        let err = synth_instance(&mut RngStream::new(0, 0), &spec).unwrap_err();
        assert!(matches!(err, Error::Construction(_)));
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = InstanceSpec::default();
        let a = synth_instance(&mut RngStream::new(9, 1), &spec).unwrap();
        let b = synth_instance(&mut RngStream::new(9, 1), &spec).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.encoding.t_renorm, b.encoding.t_renorm);
        assert_eq!(a.encoding.k, b.encoding.k);
    }

    #[test]
    fn identical_bound_embeddings_rank_high() {
        let spec = InstanceSpec {
            planted: false,
            ..InstanceSpec::default()
        };
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 1);
            let inst = synth_instance(&mut rng, &spec).unwrap();
            let mut e = inst.embeddings.clone();
            let u = RngStream::new(seed, 99).unit_vec(spec.half_dim);
            let shared: Vec<f64> = u.iter().chain(u.iter()).copied().collect();
            e.row_mut(4).copy_from_slice(&shared);
            e.row_mut(5).copy_from_slice(&shared);
            let enc = encode(&inst.encoder, &e, &inst.encoding.seq).unwrap();
            let row = enc.t_renorm.row(5);
            let target = row[4];
            let above = (1..5).filter(|&j| row[j] > target).count();
            assert!(above <= 1, "seed {seed}: row {row:?}");
        }
    }

    #[test]
    fn planted_binding_dominates_and_null_does_not_separate() {
        let planted = InstanceSpec::default();
        let null = InstanceSpec {
            planted: false,
            ..InstanceSpec::default()
        };
        let collect = |spec: &InstanceSpec| {
            let (mut b, mut u) = (Vec::new(), Vec::new());
            for seed in 0..200 {
                let inst = synth_instance(&mut RngStream::new(seed, 1), spec).unwrap();
                let (bb, uu) = row_matched_entries(&inst.encoding.t_renorm, &inst.encoding.seq);
                b.extend(bb);
                u.extend(uu);
            }
            (b, u)
        };
        let (b, u) = collect(&null);
        let ks = ks_two_sample(&b, &u).unwrap();
        assert!(ks.p_value > 0.05, "null KS p = {}", ks.p_value);
        let (b, u) = collect(&planted);
        let ks = ks_two_sample(&b, &u).unwrap();
        assert!(ks.p_value < 1e-6 && stats::mean(&b) > stats::mean(&u));
    }

    #[test]
    fn denoiser_gain_is_bounded() {
        let d = ToyDenoiser::random(3, 4, 16, 0.7);
        let mut rng = RngStream::new(3, 1);
        for _ in 0..50 {
            let scale = rng.uniform_range(0.01, 100.0);
            let z = rng.normal_mat(16, 4, scale);
            let ctx = rng.normal_mat(16, 16, 10.0);
            let out = d.apply(&z, &ctx).unwrap();
            assert!(out.frobenius_norm() <= d.gain_bound() * z.frobenius_norm() + 1e-12);
        }
    }

    #[test]
    fn single_step_without_guidance() {
        let cfg = SandboxConfig {
            tau: 1,
            ..SandboxConfig::default()
        };
        let setup = seed_setup(&cfg, 5).unwrap();
        let g = GuidanceConfig::default().off();
        let z1 = setup.init.z.clone();
        let out = denoise_loop(
            setup.init,
            &setup.instance.encoding,
            &g,
            &setup.denoiser,
            &setup.cross,
        )
        .unwrap();
        let st =
            crate::crossattn::compute_maps(&setup.cross, &z1, &setup.instance.encoding.k).unwrap();
        let ctx = st.a_avg.matmul(&setup.instance.encoding.k).unwrap();
        let expected = z1.sub(&setup.denoiser.apply(&z1, &ctx).unwrap()).unwrap();
        assert!(out.z.max_abs_diff(&expected) < 1e-15);
        assert_eq!(out.t, 0);
        assert_eq!(out.trace.len(), 2);
    }

    #[test]
    fn guidance_on_and_off_agree_before_first_scheduled_step() {
        let cfg = SandboxConfig {
            tau: 12,
            ..SandboxConfig::default()
        };
        let g_on = GuidanceConfig {
            schedule: [5].into_iter().collect(),
            inner_iters: 2,
            ..GuidanceConfig::default()
        };
        let on = run_seed(&cfg, &g_on, 2).unwrap();
        let off = run_seed(&cfg, &g_on.off(), 2).unwrap();
        assert_eq!(on.state.trace[..5], off.state.trace[..5]);
        assert_eq!(
            on.state.trace[5].loss_before,
            off.state.trace[5].loss_before
        );
        assert_ne!(on.state.trace[5].loss, off.state.trace[5].loss);
    }

    #[test]
    fn divergence_aborts_with_trace() {
        let cfg = SandboxConfig {
            tau: 30,
            denoiser_amp: -40.0,
            ..SandboxConfig::default()
        };
        // negative gain grows the latent geometrically
        let mut setup = seed_setup(
            &SandboxConfig {
                denoiser_amp: 0.0,
                ..cfg.clone()
            },
            1,
        )
        .unwrap();
        setup.denoiser.amp = cfg.denoiser_amp;
        let err = denoise_loop(
            setup.init,
            &setup.instance.encoding,
            &GuidanceConfig::default().off(),
            &setup.denoiser,
            &setup.cross,
        )
        .unwrap_err();
        assert!(matches!(err.error, Error::Divergence { .. }));
        assert!(!err.state.trace.is_empty());
    }

    #[test]
    fn summary_is_deterministic() {
        let cfg = SandboxConfig {
            tau: 22,
            ..SandboxConfig::default()
        };
        let g = GuidanceConfig::default();
        let a = summary_csv(&run_seeds(&cfg, &g, &[0, 1, 2]).unwrap()).unwrap();
        let b = summary_csv(&run_seeds(&cfg, &g, &[0, 1, 2]).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("seed,step,loss,C_bound_mean,C_unbound_mean\n"));
        assert_eq!(a.lines().count(), 1 + 3 * 23);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn off_schedule_steps_never_move_latent(seed in 0u64..1000, step in 21usize..40) {
            let cfg = SandboxConfig::default();
            let setup = seed_setup(&cfg, seed).unwrap();
            let g = GuidanceConfig::default();
            let prob = GuidanceProblem::new(&setup.cross, &setup.instance.encoding.k, &setup.instance.encoding.t_renorm, &g).unwrap();
            let up = update_latent(&setup.init.z, &g, &prob, step).unwrap();
            prop_assert_eq!(up.latent, setup.init.z);
        }
    }
}

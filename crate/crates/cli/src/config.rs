//! Run configuration: one JSON document with a section per module. Every
//! section is optional; missing keys take the built-in defaults.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsam_core::analysis::{StudyConfig, SweepConfig};
use tsam_core::guidance::GuidanceConfig;
use tsam_core::sandbox::{InstanceSpec, SandboxConfig, TOY_ALPHA_SCALE};
use tsam_core::stats::Binning;
use tsam_core::verify::{A4Config, MgfConfig, Prop1Config, Prop1Construction, Prop2Config};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            alpha: vec![5.0, 10.0, 15.0, 25.0, 40.0],
            gamma: vec![2.0, 3.0, 4.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop1Section {
    pub seed: u64,
    pub construction: Prop1Construction,
    pub n_c_grid: Vec<usize>,
    pub trials: usize,
    pub eps_target: f64,
    pub envelope: f64,
}

impl Default for Prop1Section {
    fn default() -> Self {
        Self {
            seed: 0,
            construction: Prop1Construction::default(),
            n_c_grid: vec![256, 512, 1024, 2048, 4096],
            trials: 200,
            eps_target: 0.02,
            envelope: 3.0,
        }
    }
}

impl Prop1Section {
    pub fn build(&self) -> tsam_core::Result<Prop1Config> {
        let mut cfg = Prop1Config::construct(self.seed, &self.construction)?;
        cfg.n_c_grid = self.n_c_grid.clone();
        cfg.trials = self.trials;
        cfg.eps_target = self.eps_target;
        cfg.envelope = self.envelope;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub prop1: Prop1Section,
    pub prop2: Prop2Config,
    pub a4: A4Config,
    pub mgf: MgfConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceSet {
    pub seed: u64,
    pub instances: usize,
    pub spec: InstanceSpec,
}

impl Default for InstanceSet {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            spec: InstanceSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkSection {
    pub set: InstanceSet,
    pub binning: Binning,
}

impl Default for SinkSection {
    fn default() -> Self {
        Self {
            set: InstanceSet {
                instances: 50,
                spec: InstanceSpec {
                    sink_bias: 20.0,
                    ..InstanceSpec::default()
                },
                ..InstanceSet::default()
            },
            binning: Binning::FreedmanDiaconis,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub study: StudyConfig,
    pub sweep: SweepConfig,
    pub separation: InstanceSet,
    pub sink: SinkSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; `run` uses seeds `seed..seed + seeds`.
    pub seed: u64,
    pub seeds: usize,
    /// Multiplies `guidance.alpha` inside the toy sandbox.
    pub alpha_scale: f64,
    pub guidance: GuidanceConfig,
    pub sandbox: SandboxConfig,
    pub sweep: SweepGrid,
    pub verify: VerifySection,
    pub analysis: AnalysisSection,
    /// Instance used by `dump-encoding`.
    pub encoder: InstanceSpec,
    pub format: Format,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 64,
            alpha_scale: TOY_ALPHA_SCALE,
            guidance: GuidanceConfig::default(),
            sandbox: SandboxConfig::default(),
            sweep: SweepGrid::default(),
            verify: VerifySection::default(),
            analysis: AnalysisSection::default(),
            encoder: InstanceSpec::default(),
            format: Format::Csv,
        }
    }
}

/// Command-line overrides, applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub schedule: Option<BTreeSet<usize>>,
    pub inner_iters: Option<usize>,
    pub seeds: Option<usize>,
    pub seed: Option<u64>,
    pub format: Option<Format>,
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

/// Section-level error from a module validator.
fn section(key: &str, e: tsam_core::Error) -> CliError {
    match e {
        tsam_core::Error::Config(m) if m.starts_with(key) => CliError::Config(m),
        tsam_core::Error::Config(m) => bad(key, m),
        other => bad(key, other),
    }
}

fn check(ok: bool, key: &str, bound: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(bad(key, format!("must be {bound}")))
    }
}

fn fraction_grid(v: &[f64], key: &str) -> Result<(), CliError> {
    check(v.len() >= 2, key, "a list of >= 2 values")?;
    check(
        v.iter().all(|e| *e > 0.0 && *e < 1.0),
        key,
        "a list of values in (0, 1)",
    )
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(p) = &o.preset {
            self.guidance = GuidanceConfig::preset(p).map_err(|e| section("preset", e))?;
        }
        if let Some(a) = o.alpha {
            self.guidance.alpha = a;
        }
        if let Some(g) = o.gamma {
            self.guidance.gamma = g;
        }
        if let Some(s) = &o.schedule {
            self.guidance.schedule = s.clone();
        }
        if let Some(n) = o.inner_iters {
            self.guidance.inner_iters = n;
        }
        if let Some(n) = o.seeds {
            self.seeds = n;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(f) = o.format {
            self.format = f;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        check(self.seeds >= 1, "seeds", ">= 1")?;
        check(
            self.alpha_scale > 0.0 && self.alpha_scale.is_finite(),
            "alpha_scale",
            "finite and > 0",
        )?;
        self.sandbox.validate().map_err(|e| section("sandbox", e))?;
        self.guidance
            .validate(Some(self.sandbox.tau))
            .map_err(|e| section("guidance", e))?;
        check(
            !self.sweep.alpha.is_empty()
                && self.sweep.alpha.iter().all(|a| *a >= 0.0 && a.is_finite()),
            "sweep.alpha",
            "a non-empty list of finite values >= 0",
        )?;
        check(
            !self.sweep.gamma.is_empty()
                && self.sweep.gamma.iter().all(|g| *g >= 1.0 && g.is_finite()),
            "sweep.gamma",
            "a non-empty list of finite values >= 1",
        )?;

        let p1 = &self.verify.prop1;
        check(p1.trials >= 2, "verify.prop1.trials", ">= 2")?;
        check(
            p1.n_c_grid.len() >= 2 && p1.n_c_grid.iter().all(|n| *n >= 1),
            "verify.prop1.n_c_grid",
            "a list of >= 2 positive sizes",
        )?;
        check(
            p1.eps_target > 0.0 && p1.eps_target < 1.0,
            "verify.prop1.eps_target",
            "in (0, 1)",
        )?;
        check(p1.envelope > 0.0, "verify.prop1.envelope", "> 0")?;
        let p2 = &self.verify.prop2;
        fraction_grid(&p2.eps_grid, "verify.prop2.eps_grid")?;
        check(p2.trials >= 1, "verify.prop2.trials", ">= 1")?;
        check(p2.tokens >= 3, "verify.prop2.tokens", ">= 3")?;
        let a4 = &self.verify.a4;
        fraction_grid(&a4.eps_grid, "verify.a4.eps_grid")?;
        check(a4.trials >= 1, "verify.a4.trials", ">= 1")?;
        check(a4.tokens >= 3, "verify.a4.tokens", ">= 3")?;
        check(self.verify.mgf.draws >= 2, "verify.mgf.draws", ">= 2")?;
        check(self.verify.mgf.cases >= 1, "verify.mgf.cases", ">= 1")?;

        let an = &self.analysis;
        check(
            an.study.instances >= 100,
            "analysis.study.instances",
            ">= 100",
        )?;
        an.study
            .sandbox
            .validate()
            .map_err(|e| section("analysis.study.sandbox", e))?;
        check(an.sweep.points >= 3, "analysis.sweep.points", ">= 3")?;
        check(
            an.sweep.key_norm > 0.0 && an.sweep.key_norm.is_finite(),
            "analysis.sweep.key_norm",
            "finite and > 0",
        )?;
        check(
            an.separation.instances >= 1,
            "analysis.separation.instances",
            ">= 1",
        )?;
        an.separation
            .spec
            .validate()
            .map_err(|e| section("analysis.separation.spec", e))?;
        check(
            an.sink.set.instances >= 1,
            "analysis.sink.set.instances",
            ">= 1",
        )?;
        an.sink
            .set
            .spec
            .validate()
            .map_err(|e| section("analysis.sink.set.spec", e))?;
        if let Binning::Fixed { bins, lo, hi } = an.sink.binning {
            check(
                bins >= 1 && lo < hi,
                "analysis.sink.binning",
                "bins >= 1 with lo < hi",
            )?;
        }
        self.encoder.validate().map_err(|e| section("encoder", e))?;
        Ok(())
    }

    /// Guidance as used inside the toy sandbox.
    pub fn sandbox_guidance(&self) -> GuidanceConfig {
        let mut g = self.guidance.clone();
        g.alpha *= self.alpha_scale;
        g
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64)
            .map(|k| self.seed.wrapping_add(k))
            .collect()
    }
}

/// Parses a config document; errors name the offending key path.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.into_inner()))
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = parse_config(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.guidance.gamma, 4.0);
        assert_eq!(cfg.sweep.alpha, vec![5.0, 10.0, 15.0, 25.0, 40.0]);
        assert_eq!(cfg.sweep.gamma, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = parse_config(r#"{"guidance": {"alpah": 3}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("guidance.alpah"), "{msg}");
    }

    #[test]
    fn wrong_type_names_its_path() {
        let msg = parse_config(r#"{"sandbox": {"tau": "x"}}"#)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("sandbox.tau"), "{msg}");
    }

    #[test]
    fn negative_alpha_is_rejected() {
        let cfg = parse_config(r#"{"guidance": {"alpha": -1}}"#).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("guidance.alpha"), "{msg}");
    }

    #[test]
    fn out_of_range_values_name_key_and_bound() {
        for (doc, key) in [
            (r#"{"seeds": 0}"#, "seeds"),
            (
                r#"{"verify": {"prop2": {"eps_grid": [0.1, 2.0]}}}"#,
                "verify.prop2.eps_grid",
            ),
            (
                r#"{"analysis": {"study": {"instances": 5}}}"#,
                "analysis.study.instances",
            ),
            (r#"{"sweep": {"gamma": [0.5]}}"#, "sweep.gamma"),
            (r#"{"guidance": {"schedule": [60]}}"#, "guidance"),
        ] {
            let msg = parse_config(doc)
                .unwrap()
                .validate()
                .unwrap_err()
                .to_string();
            assert!(msg.contains(key), "{doc}: {msg}");
        }
    }

    #[test]
    fn preset_ane_fixes_schedule_iters_alpha() {
        let mut cfg = parse_config("{}").unwrap();
        cfg.apply(&Overrides {
            preset: Some("anE".into()),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.guidance.schedule, [0, 10, 20].into_iter().collect());
        assert_eq!(cfg.guidance.inner_iters, 20);
        assert_eq!(cfg.guidance.alpha, 10.0);
        cfg.apply(&Overrides {
            preset: Some("tifa".into()),
            alpha: Some(5.0),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.guidance.alpha, 5.0);
        assert_eq!(cfg.guidance.schedule.len(), 25);
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}

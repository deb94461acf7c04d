use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tsam_core::analysis::{
    fig2a_csv, fig2b_csv, fig4_csv, fig5a_csv, fig5b_csv, key_map_study, key_map_sweep,
    separation_study, sink_histogram, sweep_csv, synth_instances, PairStudy,
};
use tsam_core::crossattn::{export_similarity_csv, import_maps};
use tsam_core::guidance::GuidanceConfig;
use tsam_core::numkit::io::{write_atomic, write_tensor, TensorManifest};
use tsam_core::sandbox::{run_seeds, summary_csv, synth_instance, EfficacySummary, SeedRun};
use tsam_core::toyencoder::TextEncoding;
use tsam_core::verify::{a4_extension_measure, mgf_check, prop1_measure, prop2_measure, McReport};
use tsam_core::RngStream;

use crate::config::{load_config, Format, Overrides, RunConfig};
use crate::{Claim, CliError, Command, Common, Figure, GuidanceFlags};

pub const ENCODING_FORMAT: &str = "tsam-encoding/1";

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { common, guidance } => {
            let o = Overrides {
                preset: guidance.preset.clone(),
                alpha: guidance.alpha,
                gamma: guidance.gamma,
                schedule: guidance
                    .schedule
                    .as_ref()
                    .map(|s| s.iter().copied().collect::<BTreeSet<_>>()),
                inner_iters: guidance.inner_iters,
                seeds: guidance.seeds,
                ..base_overrides(&common)
            };
            let cfg = resolve(&common, &o)?;
            run(&cfg, &guidance, &out_path(&common)?)
        }
        Command::Verify { claim, common } => {
            let cfg = resolve(&common, &base_overrides(&common))?;
            verify(&cfg, claim, &out_path(&common)?)
        }
        Command::Analyze { figure, common } => {
            let cfg = resolve(&common, &base_overrides(&common))?;
            analyze(&cfg, figure, &out_path(&common)?)
        }
        Command::DumpEncoding { common } => {
            let cfg = resolve(&common, &base_overrides(&common))?;
            dump_encoding(&cfg, &out_path(&common)?)
        }
        Command::ImportMaps { manifest, common } => import(&manifest, common.out.as_deref()),
    }
}

fn base_overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        format: c.format,
        ..Overrides::default()
    }
}

fn resolve(common: &Common, o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(o)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(c: &Common) -> Result<PathBuf, CliError> {
    c.out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required".into()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn json<T: Serialize>(v: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(tsam_core::Error::from)?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
struct SummaryRow {
    seed: u64,
    step: usize,
    loss: f64,
    #[serde(rename = "C_bound_mean")]
    c_bound_mean: f64,
    #[serde(rename = "C_unbound_mean")]
    c_unbound_mean: f64,
}

fn write_summary(dir: &Path, stem: &str, runs: &[SeedRun], format: Format) -> Result<(), CliError> {
    match format {
        Format::Csv => write(&dir.join(format!("{stem}.csv")), &summary_csv(runs)?),
        Format::Json => {
            let rows: Vec<SummaryRow> = runs
                .iter()
                .flat_map(|r| {
                    r.state.trace.iter().map(|e| SummaryRow {
                        seed: r.seed,
                        step: e.step,
                        loss: e.loss,
                        c_bound_mean: e.c_bound,
                        c_unbound_mean: e.c_unbound,
                    })
                })
                .collect();
            write(&dir.join(format!("{stem}.json")), &json(&rows)?)
        }
    }
}

#[derive(Serialize)]
struct Efficacy<'a> {
    guidance: &'a GuidanceConfig,
    #[serde(flatten)]
    summary: EfficacySummary,
}

#[derive(Serialize)]
struct SweepRow {
    alpha: f64,
    gamma: f64,
    #[serde(flatten)]
    summary: EfficacySummary,
}

fn run(cfg: &RunConfig, flags: &GuidanceFlags, out: &Path) -> Result<(), CliError> {
    let seeds = cfg.seed_list();
    let guided = cfg.sandbox_guidance();
    let off = run_seeds(&cfg.sandbox, &guided.off(), &seeds)?;
    if flags.sweep {
        let mut rows = Vec::new();
        for &gamma in &cfg.sweep.gamma {
            for &alpha in &cfg.sweep.alpha {
                let mut g = cfg.guidance.clone();
                g.alpha = alpha * cfg.alpha_scale;
                g.gamma = gamma;
                let on = run_seeds(&cfg.sandbox, &g, &seeds)?;
                let summary = EfficacySummary::from_runs(&g, &on, &off);
                println!(
                    "alpha {alpha} gamma {gamma}: separated {}/{} (off {}), p = {:.3e}",
                    summary.separated_on, summary.seeds, summary.separated_off, summary.p_value
                );
                rows.push(SweepRow {
                    alpha,
                    gamma,
                    summary,
                });
            }
        }
        return match cfg.format {
            Format::Json => write(&out.join("sweep.json"), &json(&rows)?),
            Format::Csv => {
                let mut s = String::from(
                    "alpha,gamma,seeds,loss_decreased,separated_on,separated_off,p_value\n",
                );
                for r in &rows {
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{:.17e}\n",
                        r.alpha,
                        r.gamma,
                        r.summary.seeds,
                        r.summary.loss_decreased,
                        r.summary.separated_on,
                        r.summary.separated_off,
                        r.summary.p_value
                    ));
                }
                write(&out.join("sweep.csv"), &s)
            }
        };
    }
    let on = run_seeds(&cfg.sandbox, &guided, &seeds)?;
    for r in &on {
        write(
            &out.join("traces").join(format!("seed_{}.jsonl", r.seed)),
            &r.trace_jsonl()?,
        )?;
    }
    write_summary(out, "summary", &on, cfg.format)?;
    write_summary(out, "summary_off", &off, cfg.format)?;
    let summary = EfficacySummary::from_runs(&guided, &on, &off);
    println!(
        "loss decreased on {}/{} seeds; bound > unbound on {} (guided) vs {} (unguided), p = {:.3e}",
        summary.loss_decreased, summary.seeds, summary.separated_on, summary.separated_off, summary.p_value
    );
    write(
        &out.join("efficacy.json"),
        &json(&Efficacy {
            guidance: &guided,
            summary,
        })?,
    )
}

fn verify(cfg: &RunConfig, claim: Claim, out: &Path) -> Result<(), CliError> {
    let v = &cfg.verify;
    let report: McReport = match claim {
        Claim::Prop1 => prop1_measure(&v.prop1.build()?)?,
        Claim::Prop2 => prop2_measure(&v.prop2)?,
        Claim::A4 => a4_extension_measure(&v.a4)?,
        Claim::Mgf => mgf_check(&v.mgf)?,
    };
    write(out, &json(&report)?)?;
    write(&out.with_extension("csv"), &report.to_csv()?)?;
    for f in &report.fits {
        println!(
            "{}: slope {:.4} (band [{}, {}]), r2 {:.4}",
            f.name, f.slope, f.band.0, f.band.1, f.r2
        );
    }
    if report.passed() {
        println!(
            "{}: {}",
            report.name,
            if report.report_only {
                "reported"
            } else {
                "PASS"
            }
        );
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "{}: {}",
            report.name,
            report.failures().join("; ")
        )))
    }
}

#[derive(Serialize)]
struct StudySummary<'a> {
    correlations: &'a [tsam_core::analysis::StepCorrelation],
    embedding: &'a Option<tsam_core::analysis::Separation>,
    t_prime: &'a Option<tsam_core::analysis::Separation>,
}

fn study_summary(st: &PairStudy) -> StudySummary<'_> {
    StudySummary {
        correlations: &st.correlations,
        embedding: &st.embedding,
        t_prime: &st.t_prime,
    }
}

fn write_records(
    out: &Path,
    name: &str,
    csv: String,
    st: &PairStudy,
    format: Format,
) -> Result<(), CliError> {
    match format {
        Format::Csv => write(&out.join(format!("{name}.csv")), &csv),
        Format::Json => write(&out.join(format!("{name}.json")), &json(&st.records)?),
    }
}

fn analyze(cfg: &RunConfig, figure: Figure, out: &Path) -> Result<(), CliError> {
    let an = &cfg.analysis;
    let name = format!("{figure:?}").to_lowercase();
    let summary_path = out.join(format!("{name}_summary.json"));
    match figure {
        Figure::Fig2a | Figure::Fig4 => {
            let st = key_map_study(&an.study)?;
            let csv = if figure == Figure::Fig2a {
                fig2a_csv(&st, 1)?
            } else {
                fig4_csv(&st)?
            };
            write_records(out, &name, csv, &st, cfg.format)?;
            for c in &st.correlations {
                println!(
                    "step {}: pearson {:.4}, spearman {:.4} over {} pairs",
                    c.step, c.pearson, c.spearman, c.pairs
                );
            }
            if figure == Figure::Fig4 {
                return write(&summary_path, &json(&study_summary(&st))?);
            }
            let sweep = key_map_sweep(&an.sweep)?;
            write(&out.join("fig2a_sweep.csv"), &sweep_csv(&sweep)?)?;
            #[derive(Serialize)]
            struct Fig2a<'a> {
                study: StudySummary<'a>,
                sweep_spearman: f64,
                sweep_pearson: f64,
                sweep_spearman_predicted: f64,
                sweep_in_regime: bool,
            }
            write(
                &summary_path,
                &json(&Fig2a {
                    study: study_summary(&st),
                    sweep_spearman: sweep.spearman,
                    sweep_pearson: sweep.pearson,
                    sweep_spearman_predicted: sweep.spearman_predicted,
                    sweep_in_regime: sweep.in_regime,
                })?,
            )?;
            println!("sweep spearman {:.4}", sweep.spearman);
            if sweep.in_regime && sweep.spearman < 0.9 {
                return Err(CliError::Check(format!(
                    "sweep spearman {:.4} below 0.9 inside the sink regime",
                    sweep.spearman
                )));
            }
            Ok(())
        }
        Figure::Fig2b | Figure::Fig5a => {
            let set = &an.separation;
            let inst = synth_instances(&set.spec, set.seed, set.instances)?;
            let st = separation_study(&inst)?;
            let csv = if figure == Figure::Fig2b {
                fig2b_csv(&st)?
            } else {
                fig5a_csv(&st)?
            };
            write_records(out, &name, csv, &st, cfg.format)?;
            write(&summary_path, &json(&study_summary(&st))?)?;
            let (emb, tp) = (st.embedding.as_ref(), st.t_prime.as_ref());
            let (ke, kt) = (
                emb.map_or(0.0, |s| s.ks.statistic),
                tp.map_or(0.0, |s| s.ks.statistic),
            );
            println!("KS bound vs unbound: embeddings {ke:.4}, T' {kt:.4}");
            if set.spec.planted {
                if figure == Figure::Fig2b && ke > 0.2 {
                    return Err(CliError::Check(format!("embedding KS {ke:.4} above 0.2")));
                }
                if figure == Figure::Fig5a && kt < 0.5 {
                    return Err(CliError::Check(format!("T' KS {kt:.4} below 0.5")));
                }
            }
            Ok(())
        }
        Figure::Fig5b => {
            let set = &an.sink.set;
            let inst = synth_instances(&set.spec, set.seed, set.instances)?;
            let encs: Vec<&TextEncoding> = inst.iter().map(|i| &i.encoding).collect();
            let h = sink_histogram(&encs, an.sink.binning)?;
            match cfg.format {
                Format::Csv => write(&out.join("fig5b.csv"), &fig5b_csv(&h)?)?,
                Format::Json => write(&out.join("fig5b.json"), &json(&h)?)?,
            }
            #[derive(Serialize)]
            struct Fig5b {
                bos_mean: f64,
                non_bos_mean: f64,
                ratio: f64,
            }
            println!("BOS mass / non-BOS mass = {:.3}", h.ratio);
            write(
                &summary_path,
                &json(&Fig5b {
                    bos_mean: h.bos_mean,
                    non_bos_mean: h.non_bos_mean,
                    ratio: h.ratio,
                })?,
            )
        }
    }
}

#[derive(Serialize)]
struct EncodingManifest {
    format: String,
    tensors: Vec<TensorManifest>,
}

fn dump_encoding(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let inst = synth_instance(&mut RngStream::new(cfg.seed, 1), &cfg.encoder)?;
    let enc = &inst.encoding;
    let ratios = enc.sink_ratio()?;
    let mut tensors = Vec::new();
    let mut put =
        |name: &str, m: &tsam_core::Mat, lh: Option<(usize, usize)>| -> Result<(), CliError> {
            write_tensor(out, name, m)?;
            let mut t = TensorManifest::for_mat(name, m);
            if let Some((l, h)) = lh {
                t.layer = Some(l);
                t.head = Some(h);
            }
            tensors.push(t);
            Ok(())
        };
    put("T_prime", &enc.t_prime, None)?;
    put("T_renorm", &enc.t_renorm, None)?;
    for l in 0..enc.num_layers {
        for h in 0..enc.num_heads {
            put(&format!("T_l{l}_h{h}"), enc.t(l, h), Some((l, h)))?;
        }
    }
    put("k", &enc.k, None)?;
    put("embeddings", &inst.embeddings, None)?;
    put("eps", &tsam_core::Mat::row_vector(&ratios.mean), None)?;
    put(
        "eps_heads",
        &tsam_core::Mat::from_rows(&ratios.per_head)?,
        None,
    )?;
    write(
        &out.join("manifest.json"),
        &json(&EncodingManifest {
            format: ENCODING_FORMAT.into(),
            tensors,
        })?,
    )?;
    println!("wrote {} tokens to {}", enc.seq.len(), out.display());
    Ok(())
}

fn import(manifest: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let state = import_maps(manifest)?;
    #[derive(Serialize)]
    struct Summary {
        heads: usize,
        queries: usize,
        tokens: usize,
        smoothed: bool,
        similarity: bool,
    }
    let s = Summary {
        heads: state.a_stack.len(),
        queries: state.a_avg.rows(),
        tokens: state.a_avg.cols(),
        smoothed: state.a_smooth.is_some(),
        similarity: state.c.is_some(),
    };
    print!("{}", json(&s)?);
    if let Some(dir) = out {
        export_similarity_csv(&state, dir)?;
    }
    Ok(())
}

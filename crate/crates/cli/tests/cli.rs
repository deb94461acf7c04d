use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tsam_core::crossattn::{
    compute_maps, export_state, similarity, smooth, CrossGeometry, CrossParams,
};
use tsam_core::{Mat, RngStream};

fn tsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsam"))
        .args(args)
        .env_remove("TSAM_THREADS")
        .output()
        .expect("spawn tsam")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_RUN: &str =
    r#"{"sandbox": {"tau": 8}, "guidance": {"schedule": [0, 3], "inner_iters": 3}}"#;

#[test]
fn missing_config_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("does_not_exist.json");
    let o = tsam(&[
        "run",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does_not_exist.json"), "{}", stderr(&o));
}

#[test]
fn malformed_config_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    for (doc, key) in [
        (r#"{"guidance": {"alpha": -1}}"#, "guidance.alpha"),
        (
            r#"{"sandbox": {"instance": {"noize": 1}}}"#,
            "sandbox.instance.noize",
        ),
        (
            r#"{"verify": {"prop2": {"trials": "many"}}}"#,
            "verify.prop2.trials",
        ),
    ] {
        let cfg = write_config(dir.path(), doc);
        let o = tsam(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{doc}");
        assert!(stderr(&o).contains(key), "{doc}: {}", stderr(&o));
    }
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(tsam(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(tsam(&["verify", "prop9"]).status.code(), Some(2));
    // --out missing
    assert_eq!(tsam(&["dump-encoding"]).status.code(), Some(2));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_tsam"))
        .args(["dump-encoding", "--out", "unused"])
        .env("TSAM_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(2));
}

#[test]
fn run_is_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RUN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = tsam(&[
            "run",
            "--config",
            &cfg,
            "--seeds",
            "4",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in [
        "summary.csv",
        "summary_off.csv",
        "efficacy.json",
        "traces/seed_3.jsonl",
    ] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs");
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.starts_with("seed,step,loss,C_bound_mean,C_unbound_mean\n"));
    // 4 seeds x (tau + 1) rows, final step included
    assert_eq!(summary.lines().count(), 1 + 4 * 9);
}

#[test]
fn flags_override_config_and_json_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RUN);
    let out = dir.path().join("r");
    let o = tsam(&[
        "run",
        "--config",
        &cfg,
        "--seeds",
        "2",
        "--alpha",
        "3",
        "--gamma",
        "2",
        "--schedule",
        "1,2",
        "--inner-iters",
        "2",
        "--format",
        "json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eff: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("efficacy.json")).unwrap()).unwrap();
    assert_eq!(eff["guidance"]["gamma"], 2.0);
    assert_eq!(eff["guidance"]["inner_iters"], 2);
    assert_eq!(eff["guidance"]["schedule"], serde_json::json!([1, 2]));
    // toy sandbox scale applied on top of the flag
    assert_eq!(eff["guidance"]["alpha"], 30.0);
    let rows: Vec<serde_json::Value> =
        serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 9);
    assert!(rows[0].get("C_bound_mean").is_some());
}

#[test]
fn schedule_outside_loop_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RUN);
    let o = tsam(&[
        "run",
        "--config",
        &cfg,
        "--schedule",
        "0,8",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schedule"));
}

#[test]
fn sweep_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"sandbox": {"tau": 4}, "guidance": {"schedule": [0], "inner_iters": 1}}"#,
    );
    let out = dir.path().join("s");
    let o = tsam(&[
        "run",
        "--sweep",
        "--config",
        &cfg,
        "--seeds",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("5,2,2,"));
}

#[test]
fn verify_writes_report_and_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"verify": {"prop2": {"trials": 40}}}"#);
    let report = dir.path().join("r.json");
    let o = tsam(&[
        "verify",
        "prop2",
        "--config",
        &cfg,
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(!r["cells"].as_array().unwrap().is_empty());
    let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn failed_check_exits_1_after_writing() {
    // a planted instance with no planted signal cannot separate T'
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"analysis": {"separation": {"spec": {"plant_strength": 0.0, "score_beta": 0.0}}}}"#,
    );
    let out = dir.path().join("a");
    let o = tsam(&[
        "analyze",
        "fig5a",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(out.join("fig5a.csv").exists());
    assert!(out.join("fig5a_summary.json").exists());
}

#[test]
fn analyze_figures_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    for (fig, header) in [
        ("fig2b", "instance,i,j,kind,emb_cos"),
        ("fig5a", "instance,i,j,kind,t_prime,t_renorm"),
        ("fig5b", "series,bin_lo,bin_hi,count"),
    ] {
        let o = tsam(&["analyze", fig, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{fig}: {}", stderr(&o));
        let csv = fs::read_to_string(out.join(format!("{fig}.csv"))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), header);
    }
}

#[test]
fn dump_encoding_round_trips_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = tsam(&[
        "dump-encoding",
        "--seed",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = m["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["name"].as_str().unwrap())
        .collect();
    for n in ["T_prime", "T_renorm", "T_l0_h0", "k", "eps"] {
        assert!(names.contains(&n), "{n} missing from {names:?}");
    }
    let (_, t) = tsam_core::numkit::io::read_tensor(&dir.path().join("T_prime.json")).unwrap();
    for (i, s) in t.row_sums().iter().enumerate() {
        assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
    }
}

#[test]
fn import_maps_validates_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngStream::new(5, 0);
    let geo = CrossGeometry::default();
    let params = CrossParams::random(&mut rng, &geo);
    let z = rng.normal_mat(16, geo.channels, 1.0);
    let k = rng.normal_mat(6, geo.key_dim, 1.0);
    let st = similarity(smooth(compute_maps(&params, &z, &k).unwrap(), 3, 0.5).unwrap()).unwrap();
    let manifest = export_state(&st, &dir.path().join("state")).unwrap();
    let out = dir.path().join("csv");
    let o = tsam(&[
        "import-maps",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["tokens"], 6);
    let c = tsam_core::numkit::io::mat_from_csv(&fs::read_to_string(out.join("C.csv")).unwrap())
        .unwrap();
    assert_eq!(c, st.c.clone().unwrap());

    // break row-stochasticity of the averaged map
    let bad = Mat::filled(16, 6, 0.5);
    tsam_core::numkit::io::write_tensor(&dir.path().join("state"), "A_avg", &bad).unwrap();
    let o = tsam(&["import-maps", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

//! End-to-end paths across modules: encoder -> cross-attention -> guidance
//! loop, and the tensor exchange round trip.

use tsam_core::crossattn::{compute_maps, export_state, import_maps, similarity, smooth};
use tsam_core::sandbox::{run_seeds, seed_setup, summary_csv, toy_preset, SandboxConfig, SeedRun};
use tsam_core::Error;

#[test]
fn tifa_schedule_lowers_loss_on_most_seeds() {
    let cfg = SandboxConfig::default();
    let g = toy_preset("tifa").unwrap();
    let seeds: Vec<u64> = (0..32).collect();
    let runs = run_seeds(&cfg, &g, &seeds).unwrap();
    let lowered = runs
        .iter()
        .filter(|r| r.scheduled_losses(&g).is_some_and(|(a, b)| b < a))
        .count();
    assert!(lowered >= 28, "{lowered}/32");
    for r in &runs {
        // one trace entry per step plus the final state
        assert_eq!(r.state.trace.len(), cfg.tau + 1);
        let guided = r
            .state
            .trace
            .iter()
            .filter(|e| !e.inner_losses.is_empty())
            .count();
        assert_eq!(guided, g.schedule.len());
    }
}

#[test]
fn unguided_loop_ignores_alpha() {
    let cfg = SandboxConfig {
        tau: 6,
        ..SandboxConfig::default()
    };
    let seeds = [3, 4];
    let mut a = toy_preset("anE").unwrap().off();
    let b_runs: Vec<SeedRun> = {
        let mut b = a.clone();
        b.alpha = 1e6;
        run_seeds(&cfg, &b, &seeds).unwrap()
    };
    a.alpha = 0.0;
    let a_runs = run_seeds(&cfg, &a, &seeds).unwrap();
    assert_eq!(summary_csv(&a_runs).unwrap(), summary_csv(&b_runs).unwrap());
}

#[test]
fn exported_state_of_a_seed_reimports_exactly() {
    let cfg = SandboxConfig::default();
    let setup = seed_setup(&cfg, 11).unwrap();
    let st = similarity(
        smooth(
            compute_maps(&setup.cross, &setup.init.z, &setup.instance.encoding.k).unwrap(),
            3,
            0.5,
        )
        .unwrap(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_state(&st, dir.path()).unwrap();
    let back = import_maps(&manifest).unwrap();
    assert_eq!(back.a_avg, st.a_avg);
    assert_eq!(back.c, st.c);
    assert_eq!(back.s, st.s);
    assert_eq!(back.a_stack.len(), st.a_stack.len());
}

#[test]
fn mismatched_widths_are_rejected_before_running() {
    let mut cfg = SandboxConfig::default();
    cfg.cross.key_dim = 8;
    assert!(matches!(seed_setup(&cfg, 0), Err(Error::Config(_))));
}

use apbm_core::experiment::{parse_config, run_experiment, RunOptions};
use apbm_core::{run_filter, simulate_truth, FilterConfig, TruthConfig, Variant};

#[test]
fn config_to_results_through_public_api() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "experiment.n_mc = 2\ntruth.T = 15\nexperiment.variants = PBM, APBM_SSA\nexperiment.epsilons = 0.1\nexperiment.out_dir = {}\n",
        dir.path().display()
    );
    let cfg = parse_config(&text).unwrap();
    let res = run_experiment(&cfg, &RunOptions { write: true, keep_runs: true }).unwrap();
    assert!(res.succeeded());
    assert_eq!(res.seeds, vec![1, 2]);
    assert_eq!(res.labels, vec!["PBM", "APBM_SSA_full_e=0.1"]);
    for m in &res.metrics {
        assert_eq!(m.rmse_pos.len(), 15);
        assert!(m.rmse_pos.iter().chain(&m.anees).all(|v| v.is_finite()));
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 15);
}

#[test]
fn filters_track_a_simulated_target() {
    let truth = TruthConfig {
        steps: 100,
        seed: 5,
        ..TruthConfig::default()
    };
    let traj = simulate_truth(&truth).unwrap();
    for variant in [Variant::Tm, Variant::Pbm, Variant::ApbmParamReg, Variant::ApbmSsa] {
        let out = run_filter(&FilterConfig::new(variant, "f", &truth), &truth, &traj).unwrap();
        let last = out.records.last().unwrap();
        let err = (last.x_hat - traj.states[99]).norm();
        assert!(err < 50.0, "{variant:?} final error {err}");
    }
}

//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! The desk-scale experiment (25 runs of 300 steps) is run once and shared
//! by the criteria that need it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use apbm_core::apbm::{Apbm, ApbmParams};
use apbm_core::ckf::{cubature_points, measurement_update, time_update};
use apbm_core::constraint::{
    constrain_cubature_set, gate_on_mean, rho_ss, solve_kappa, split_joint, ConstraintSpec, MetricKind, Selection,
};
use apbm_core::estimator::{run_filter, Filter, FilterConfig};
use apbm_core::experiment::{
    bind_to_run, compare, parse_config, run_experiment, series_from_result, Comparison, ExperimentConfig,
    ExperimentResult, Flag, RunOptions, CHECK_FULL_POS, CHECK_FULL_VEL, CHECK_POS_APBM_PBM, CHECK_VELSEL_POS,
    CHECK_VELSEL_VEL, CHECK_VEL_PBM_APBM,
};
use apbm_core::gaussian::{GaussianBelief, LinearMeasurement};
use apbm_core::metrics::{anees_k, rmse_k, McEnsemble};
use apbm_core::truth::cv_matrix;
use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DESK_CONFIG: &str = "\
experiment.profile = desk
experiment.variants = TM, PBM, APBM, APBM_UNC, APBM_SSA
experiment.selections = full, velocity
experiment.epsilons = 0.03, 0.1, 1
";

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Desk {
    cfg: ExperimentConfig,
    result: ExperimentResult,
    comparison: Comparison,
    elapsed: Duration,
}

fn desk() -> Desk {
    let cfg = parse_config(DESK_CONFIG).expect("desk config");
    let start = Instant::now();
    let result = run_experiment(
        &cfg,
        &RunOptions {
            write: false,
            keep_runs: true,
        },
    )
    .expect("desk experiment");
    let elapsed = start.elapsed();
    let comparison = compare(&series_from_result(&result)).expect("comparison");
    Desk {
        cfg,
        result,
        comparison,
        elapsed,
    }
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Textbook Kalman filter used as the reference for the cubature filter.
fn kalman_reference(
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    mut x: DVector<f64>,
    mut p: DMatrix<f64>,
    ys: &[DVector<f64>],
) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let mut out = Vec::new();
    for y in ys {
        x = f * &x;
        p = f * &p * f.transpose() + q;
        let s = h * &p * h.transpose() + r;
        let k = &p * h.transpose() * s.try_inverse().unwrap();
        x = &x + &k * (y - h * &x);
        let i = DMatrix::identity(4, 4);
        let ikh = &i - &k * h;
        // Joseph form.
        p = &ikh * &p * ikh.transpose() + &k * r * k.transpose();
        out.push((x.clone(), p.clone()));
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let f = DMatrix::from_column_slice(4, 4, cv_matrix(1.0).as_slice());
    let m = DMatrix::from_row_slice(4, 2, &[0.5, 0.0, 1.0, 0.0, 0.0, 0.5, 0.0, 1.0]);
    let q = &m * &m.transpose() * 0.01 + DMatrix::identity(4, 4) * 1e-4;
    let h = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.3]));
    let sensor = LinearMeasurement::new(h.clone(), r.clone()).unwrap();

    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let mut x = DVector::from_vec(vec![10.0, 1.0, -5.0, 0.5]);
    let ys: Vec<DVector<f64>> = (0..100)
        .map(|_| {
            let w = DVector::from_fn(2, |_, _| 0.1 * normal(&mut rng));
            x = &f * &x + &m * w;
            &h * &x + DVector::from_fn(2, |i, _| r[(i, i)].sqrt() * normal(&mut rng))
        })
        .collect();

    let x0 = DVector::from_vec(vec![9.0, 0.0, -4.0, 0.0]);
    let p0 = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 4.0, 1.0]));
    let reference = kalman_reference(&f, &q, &h, &r, x0.clone(), p0.clone(), &ys);

    let mut belief = GaussianBelief::new(x0, p0).unwrap();
    let (mut dmean, mut dcov) = (0.0f64, 0.0f64);
    for (y, (xr, pr)) in ys.iter().zip(&reference) {
        let set = cubature_points(&belief).unwrap();
        let pred = time_update(&set, |p| &f * p, &q).unwrap();
        belief = measurement_update(&pred, y, &sensor).unwrap();
        dmean = dmean.max((&belief.mean - xr).amax());
        dcov = dcov.max((&belief.cov - pr).amax());
    }
    let elapsed = start.elapsed();
    Outcome::new(
        dmean <= 1e-8 && dcov <= 1e-8 && elapsed < Duration::from_secs(1),
        format!("max |dmean| {dmean:.2e}, max |dcov| {dcov:.2e}, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let model = Apbm::constant_velocity(1.0);
    let bar = ApbmParams::theta_bar();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = Vector4::from_fn(|_, _| rng.random_range(-1e3..1e3));
        let d = (model.transition(&x, &bar) - model.f * x).amax();
        worst = worst.max(d);
    }
    Outcome::new(worst == 0.0, format!("max error {worst:e} over 1000 states"))
}

/// Replays the velocity-constrained filter step by step and evaluates the
/// metric on every constrained cubature point directly.
fn criterion_3(d: &Desk) -> Outcome {
    let label = "APBM_SSA_vel_e=0.03";
    let idx = d.result.labels.iter().position(|l| l == label).unwrap();
    let template = &d.cfg.filter_configs().unwrap()[idx];
    let spec = &template.constraint;
    let bound = spec.satisfied_bound();
    let model = Apbm::constant_velocity(d.cfg.truth.ts);

    let (mut gates, mut points, mut worst) = (0usize, 0usize, 0.0f64);
    let mut recorded_worst = 0.0f64;
    for run in &d.result.runs {
        let truth = d.cfg.truth_for_run(run.run);
        let out = run.filters[idx].as_ref().unwrap();
        let mut filter = Filter::new(bind_to_run(template, &truth), &truth).unwrap();
        for k in 0..run.trajectory.len() {
            if k > 0 {
                let belief = filter.belief();
                let mean = belief.mean.as_slice();
                let (theta, x) = split_joint(mean).unwrap();
                if gate_on_mean(&model, &x, &theta, spec).unwrap() {
                    let set = cubature_points(belief).unwrap();
                    let constrained = constrain_cubature_set(&model, &set, spec).unwrap().set;
                    for i in 0..constrained.len() {
                        let p = constrained.point(i);
                        let (th, xi) = split_joint(p.as_slice()).unwrap();
                        let rho = rho_ss(&model.transition(&xi, &th), &model.pbm(&xi), spec).unwrap();
                        worst = worst.max(rho);
                        points += 1;
                    }
                }
            }
            let rec = filter.step(&run.trajectory.measurements[k], None).unwrap();
            // The replay must reproduce the experiment's own records.
            assert_eq!(rec, out.records[k]);
            if rec.gate_fired {
                gates += 1;
                recorded_worst = recorded_worst.max(rec.max_rho_constrained.unwrap());
            }
        }
    }
    Outcome::new(
        gates > 0 && worst <= bound && recorded_worst <= bound,
        format!("{gates} gated steps, {points} points, max rho {worst:.3e} (bound {bound:.3e})"),
    )
}

fn run_on_desk(d: &Desk, cfg: &FilterConfig) -> Vec<apbm_core::FilterOutput> {
    d.result
        .runs
        .iter()
        .map(|run| {
            let truth = d.cfg.truth_for_run(run.run);
            run_filter(&bind_to_run(cfg, &truth), &truth, &run.trajectory).unwrap()
        })
        .collect()
}

fn ssa_config(d: &Desk, label: &str, selection: Selection, epsilon: f64) -> FilterConfig {
    let base = d
        .cfg
        .filter_configs()
        .unwrap()
        .into_iter()
        .find(|c| c.label == "APBM_UNC")
        .unwrap();
    FilterConfig {
        label: label.into(),
        constraint: ConstraintSpec::from_process_noise(
            MetricKind::Ssa,
            epsilon,
            selection.indices(),
            &d.cfg.q_pbm(),
            None,
            false,
        )
        .unwrap(),
        ..base
    }
}

fn criterion_4(d: &Desk) -> Outcome {
    let unc_idx = d.result.labels.iter().position(|l| l == "APBM_UNC").unwrap();
    let mut worst = 0.0f64;
    let mut fired = false;
    for sel in [Selection::Full, Selection::Velocity] {
        let outs = run_on_desk(d, &ssa_config(d, "loose", sel, 1e12));
        for (run, out) in d.result.runs.iter().zip(&outs) {
            let unc = run.filters[unc_idx].as_ref().unwrap();
            fired |= out.gate_fired_any();
            for (a, b) in out.records.iter().zip(&unc.records) {
                worst = worst.max((a.x_hat - b.x_hat).amax());
            }
        }
    }
    Outcome::new(
        worst <= 1e-9 && !fired,
        format!("max |dx| {worst:.2e} against APBM_UNC, gate fired: {fired}"),
    )
}

fn criterion_5(d: &Desk) -> Outcome {
    let cfg = ssa_config(d, "tight", Selection::Full, 1e-12);
    let bound = cfg.constraint.satisfied_bound();
    let outs = run_on_desk(d, &cfg);
    let mut worst = 0.0f64;
    let mut over = 0usize;
    let mut ens = McEnsemble::default();
    for (run, out) in d.result.runs.iter().zip(&outs) {
        for rec in out.records.iter().skip(1) {
            let dev = rec.predicted_deviation.unwrap();
            worst = worst.max(dev);
            over += usize::from(dev > bound);
        }
        ens.push_run(run.trajectory.states.clone(), out.estimates(), out.covariances());
    }
    let med = |v: Vec<f64>| apbm_core::metrics::median(&v).unwrap();
    let pos = med(rmse_k(&ens, &apbm_core::metrics::POSITION).unwrap());
    let vel = med(rmse_k(&ens, &apbm_core::metrics::VELOCITY).unwrap());
    let pbm = d.comparison.row("PBM").unwrap();
    let rel_pos = (pos - pbm.rmse_pos).abs() / pbm.rmse_pos;
    let rel_vel = (vel - pbm.rmse_vel).abs() / pbm.rmse_vel;
    Outcome::new(
        over == 0 && rel_pos <= 0.05 && rel_vel <= 0.05,
        format!(
            "max deviation {worst:.2e} ({over} steps above {bound:.2e}); rmse pos {pos:.4} vs PBM {:.4} ({:+.1}%), vel {vel:.4} vs {:.4} ({:+.1}%)",
            pbm.rmse_pos,
            100.0 * (pos / pbm.rmse_pos - 1.0),
            pbm.rmse_vel,
            100.0 * (vel / pbm.rmse_vel - 1.0)
        ),
    )
}

fn criterion_6() -> Outcome {
    let model = Apbm::constant_velocity(1.0);
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut tested = 0;
    while tested < 100 {
        let x = Vector4::from_fn(|_, _| rng.random_range(-50.0..50.0));
        let a: f64 = rng.random_range(0.05..2.0);
        let fx = (model.f * x).norm();
        let eps: f64 = rng.random_range(1e-6..1.0);
        let closed = eps.sqrt() / (a * fx);
        if !(closed < 1.0) {
            continue;
        }
        let mut theta = ApbmParams::theta_bar();
        theta.phi0 = 1.0 + a;
        let spec = ConstraintSpec::new(MetricKind::Ssa, eps, Selection::Full.indices(), DMatrix::identity(4, 4), 0.0, false)
            .unwrap();
        let kappa = solve_kappa(&model, &x, &theta, &spec).unwrap();
        worst = worst.max((kappa - closed).abs());
        tested += 1;
    }
    Outcome::new(worst <= 1e-8, format!("max |kappa - closed form| {worst:.2e} over 100 instances"))
}

fn flag_ok(c: &Comparison, name: &str, allow_tie: bool) -> (bool, String) {
    let check = c.check(name).unwrap();
    let ok = check.flag == Flag::Pass || (allow_tie && check.flag == Flag::Tie);
    (ok, format!("[{}] {}: {}", check.flag, name, check.detail))
}

fn criterion_7(d: &Desk) -> Outcome {
    let parts = [
        flag_ok(&d.comparison, CHECK_POS_APBM_PBM, false),
        flag_ok(&d.comparison, CHECK_VEL_PBM_APBM, false),
        flag_ok(&d.comparison, CHECK_FULL_POS, true),
        flag_ok(&d.comparison, CHECK_FULL_VEL, true),
    ];
    let budget = d.elapsed <= Duration::from_secs(600);
    let pass = budget && parts.iter().all(|p| p.0);
    let mut detail = format!("desk run {:.1?}", d.elapsed);
    for (_, line) in &parts {
        detail.push_str("\n      ");
        detail.push_str(line);
    }
    Outcome::new(pass, detail)
}

fn criterion_8(d: &Desk) -> Outcome {
    let parts = [
        flag_ok(&d.comparison, CHECK_VELSEL_POS, true),
        flag_ok(&d.comparison, CHECK_VELSEL_VEL, true),
    ];
    let mut detail = String::new();
    for (i, (_, line)) in parts.iter().enumerate() {
        if i > 0 {
            detail.push_str("\n      ");
        }
        detail.push_str(line);
    }
    Outcome::new(parts.iter().all(|p| p.0), detail)
}

fn criterion_9(d: &Desk) -> Outcome {
    let tm = d.result.metrics_for("TM").unwrap();
    let avg = tm.anees.iter().sum::<f64>() / tm.anees.len() as f64;
    let n = tm.runs as f64;
    let chi = ChiSquared::new(4.0 * n).unwrap();
    let (lo, hi) = (chi.inverse_cdf(0.005) / n, chi.inverse_cdf(0.995) / n);
    Outcome::new(
        (lo..=hi).contains(&avg),
        format!("time-averaged ANEES {avg:.3}, 99% band [{lo:.3}, {hi:.3}] for {} runs", tm.runs),
    )
}

fn criterion_10() -> Outcome {
    let zero = Vector4::zeros();
    let ens = McEnsemble::new(
        vec![vec![zero], vec![zero]],
        vec![vec![Vector4::new(-1.0, 0.0, 0.0, 0.0)], vec![Vector4::new(0.0, -1.0, 0.0, 0.0)]],
        vec![vec![Matrix4::identity()], vec![Matrix4::identity()]],
    )
    .unwrap();
    let rmse = rmse_k(&ens, &[0]).unwrap();
    let anees = anees_k(&ens).unwrap();
    let want_rmse = (1.0f64 / 2.0).sqrt();
    // Mean squared error norm with P = I: (1 + 1) / 2.
    let want_anees = 1.0;
    Outcome::new(
        rmse == vec![want_rmse] && anees == vec![want_anees],
        format!("rmse {:?} (want {want_rmse}), anees {:?} (want {want_anees})", rmse, anees),
    )
}

fn csv_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_11() -> Outcome {
    let text = "\
experiment.n_mc = 3
truth.T = 60
experiment.base_seed = 41
experiment.variants = TM, PBM, APBM, APBM_UNC, APBM_SSA
experiment.selections = full, velocity
experiment.epsilons = 0.03, 1
";
    let mut outputs = Vec::new();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, workers) in dirs.iter().zip([1, 2]) {
        let mut cfg = parse_config(text).unwrap();
        cfg.out_dir = dir.path().to_path_buf();
        cfg.workers = workers;
        run_experiment(
            &cfg,
            &RunOptions {
                write: true,
                keep_runs: false,
            },
        )
        .unwrap();
        outputs.push(csv_files(dir.path()));
    }
    let same = outputs[0] == outputs[1];
    Outcome::new(
        same && !outputs[0].is_empty(),
        format!("{} CSV files compared across 1 and 2 workers, identical: {same}", outputs[0].len()),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "cubature filter matches Kalman filter", criterion_1()),
        (2, "anchor parameters reproduce the physics model", criterion_2()),
        (6, "boundary solve matches closed form", criterion_6()),
        (10, "metric micro-ensembles", criterion_10()),
        (11, "determinism", criterion_11()),
    ];
    let d = desk();
    results.push((3, "constraint satisfaction", criterion_3(&d)));
    results.push((4, "loose ball recovers unconstrained APBM", criterion_4(&d)));
    results.push((5, "tight ball recovers PBM", criterion_5(&d)));
    results.push((7, "full-state orderings", criterion_7(&d)));
    results.push((8, "velocity-only orderings", criterion_8(&d)));
    results.push((9, "TM consistency", criterion_9(&d)));
    results.sort_by_key(|r| r.0);

    println!("\nmedians over the desk experiment:\n{}", d.comparison);
    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("\n{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

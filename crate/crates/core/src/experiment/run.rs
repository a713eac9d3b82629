//! Monte-Carlo execution and persistence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::Serialize;

use super::config::{bind_to_run, ExperimentConfig};
use crate::error::{Error, Result};
use crate::estimator::{run_filter, FilterOutput};
use crate::metrics::{anees_k, boxplot_summary, error_cdf, rmse_k, BoxSummary, McEnsemble, POSITION, VELOCITY};
use crate::truth::{fmt17, simulate_truth, TruthTrajectory};

/// Abscissae of the error CDF: log-spaced from 1e-3 to 1e3.
pub fn cdf_grid() -> Vec<f64> {
    (0..=120).map(|i| 10f64.powf(-3.0 + i as f64 / 20.0)).collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write CSVs and the manifest under `cfg.out_dir`.
    pub write: bool,
    /// Keep every filter's full per-step records in the result.
    pub keep_runs: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub run: usize,
    pub seed: u64,
    pub label: String,
    pub error: String,
}

/// One realization: the trajectory and the output of every filter, in
/// configuration order.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run: usize,
    pub seed: u64,
    pub trajectory: TruthTrajectory,
    pub filters: Vec<std::result::Result<FilterOutput, String>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantSummary {
    pub rmse_pos: BoxSummary,
    pub rmse_vel: BoxSummary,
    pub anees: BoxSummary,
}

#[derive(Debug, Clone)]
pub struct VariantMetrics {
    pub label: String,
    /// Runs that completed and entered the metrics.
    pub runs: usize,
    pub rmse_pos: Vec<f64>,
    pub rmse_vel: Vec<f64>,
    pub anees: Vec<f64>,
    pub cdf_pos: Vec<f64>,
    pub cdf_vel: Vec<f64>,
    pub summary: VariantSummary,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub labels: Vec<String>,
    pub metrics: Vec<VariantMetrics>,
    pub failures: Vec<Failure>,
    pub seeds: Vec<u64>,
    /// Present with [`RunOptions::keep_runs`].
    pub runs: Vec<RunOutput>,
}

impl ExperimentResult {
    pub fn metrics_for(&self, label: &str) -> Option<&VariantMetrics> {
        self.metrics.iter().find(|m| m.label == label)
    }

    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    config: &'a ExperimentConfig,
    seeds: &'a [u64],
    labels: &'a [String],
    failures: &'a [Failure],
}

/// Per-run state carried to the merge step.
struct RunData {
    run: usize,
    seed: u64,
    states: Vec<Vector4<f64>>,
    estimates: Vec<Option<(Vec<Vector4<f64>>, Vec<Matrix4<f64>>)>>,
    failures: Vec<Failure>,
    kept: Option<RunOutput>,
}

fn run_dir(cfg: &ExperimentConfig, sub: &str) -> std::path::PathBuf {
    cfg.out_dir.join(sub)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn bool01(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn write_estimates(path: &Path, outputs: &[std::result::Result<FilterOutput, String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["k", "variant", "xhat", "vxhat", "yhat", "vyhat", "pxx_trace", "gate_fired", "kappa_min"])?;
    for out in outputs.iter().flatten() {
        for (k, r) in out.records.iter().enumerate() {
            w.write_record([
                k.to_string(),
                out.label.clone(),
                fmt17(r.x_hat[0]),
                fmt17(r.x_hat[1]),
                fmt17(r.x_hat[2]),
                fmt17(r.x_hat[3]),
                fmt17(r.p_xx.trace()),
                bool01(r.gate_fired).into(),
                fmt17(r.kappa_min),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_diagnostics(path: &Path, out: &FilterOutput) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["k", "gate_fired", "kappa_min", "rho_at_mean"])?;
    for (k, r) in out.records.iter().enumerate() {
        w.write_record([
            k.to_string(),
            bool01(r.gate_fired).into(),
            fmt17(r.kappa_min),
            r.rho_at_mean.map(fmt17).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run_one(
    cfg: &ExperimentConfig,
    filters: &[crate::estimator::FilterConfig],
    run: usize,
    opts: &RunOptions,
) -> Result<RunData> {
    let truth = cfg.truth_for_run(run);
    let seed = truth.seed;
    let mut failures = Vec::new();
    let trajectory = match simulate_truth(&truth) {
        Ok(t) => t,
        Err(e) => {
            // Without a trajectory no filter can run.
            failures.extend(filters.iter().map(|f| Failure {
                run,
                seed,
                label: f.label.clone(),
                error: format!("truth simulation: {e}"),
            }));
            return Ok(RunData {
                run,
                seed,
                states: Vec::new(),
                estimates: vec![None; filters.len()],
                failures,
                kept: None,
            });
        }
    };

    let outputs: Vec<std::result::Result<FilterOutput, String>> = filters
        .iter()
        .map(|f| {
            run_filter(&bind_to_run(f, &truth), &truth, &trajectory).map_err(|e| {
                log::error!("run {run} {}: {e}", f.label);
                e.to_string()
            })
        })
        .collect();
    for (f, out) in filters.iter().zip(&outputs) {
        if let Err(e) = out {
            failures.push(Failure {
                run,
                seed,
                label: f.label.clone(),
                error: e.clone(),
            });
        }
    }

    if opts.write {
        let name = format!("run_{run:04}");
        trajectory.write_csv(create(&run_dir(cfg, "trajectories").join(format!("{name}.csv")))?)?;
        write_estimates(&run_dir(cfg, "estimates").join(format!("{name}.csv")), &outputs)?;
        for out in outputs.iter().flatten() {
            if out.records.iter().any(|r| r.rho_at_mean.is_some()) {
                write_diagnostics(
                    &run_dir(cfg, "diagnostics").join(format!("{name}_{}.csv", out.label)),
                    out,
                )?;
            }
        }
    }

    let estimates = outputs
        .iter()
        .map(|o| o.as_ref().ok().map(|o| (o.estimates(), o.covariances())))
        .collect();
    let states = trajectory.states.clone();
    let kept = opts.keep_runs.then(|| RunOutput {
        run,
        seed,
        trajectory,
        filters: outputs,
    });
    Ok(RunData {
        run,
        seed,
        states,
        estimates,
        failures,
        kept,
    })
}

fn variant_metrics(label: String, ens: &McEnsemble, grid: &[f64]) -> Result<Option<VariantMetrics>> {
    if ens.runs() == 0 {
        return Ok(None);
    }
    let rmse_pos = rmse_k(ens, &POSITION)?;
    let rmse_vel = rmse_k(ens, &VELOCITY)?;
    let anees = anees_k(ens)?;
    let summary = VariantSummary {
        rmse_pos: boxplot_summary(&rmse_pos)?,
        rmse_vel: boxplot_summary(&rmse_vel)?,
        anees: boxplot_summary(&anees)?,
    };
    Ok(Some(VariantMetrics {
        label,
        runs: ens.runs(),
        cdf_pos: error_cdf(ens, &POSITION, grid),
        cdf_vel: error_cdf(ens, &VELOCITY, grid),
        rmse_pos,
        rmse_vel,
        anees,
        summary,
    }))
}

fn write_metrics(dir: &Path, metrics: &[VariantMetrics], grid: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(&dir.join("metrics.csv"))?);
    w.write_record(["k", "variant", "rmse_pos", "rmse_vel", "anees"])?;
    for m in metrics {
        for k in 0..m.rmse_pos.len() {
            w.write_record([
                k.to_string(),
                m.label.clone(),
                fmt17(m.rmse_pos[k]),
                fmt17(m.rmse_vel[k]),
                fmt17(m.anees[k]),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&dir.join("cdf.csv"))?);
    w.write_record(["abscissa", "variant", "cdf_pos", "cdf_vel"])?;
    for m in metrics {
        for (i, a) in grid.iter().enumerate() {
            w.write_record([fmt17(*a), m.label.clone(), fmt17(m.cdf_pos[i]), fmt17(m.cdf_vel[i])])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
    let mut header = vec!["variant".to_string(), "runs".to_string()];
    for metric in ["rmse_pos", "rmse_vel", "anees"] {
        for stat in ["min", "q1", "median", "q3", "max"] {
            header.push(format!("{metric}_{stat}"));
        }
    }
    w.write_record(&header)?;
    for m in metrics {
        let mut row = vec![m.label.clone(), m.runs.to_string()];
        for b in [m.summary.rmse_pos, m.summary.rmse_vel, m.summary.anees] {
            row.extend([b.min, b.q1, b.median, b.q3, b.max].map(fmt17));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every configured filter on each simulated realization.
///
/// All filters of one run consume the same trajectory. Filter failures are
/// collected in the result (and the manifest) rather than aborting; I/O and
/// configuration problems return an error.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    let filters = cfg.filter_configs()?;
    let labels: Vec<String> = filters.iter().map(|f| f.label.clone()).collect();
    if opts.write {
        for sub in ["trajectories", "estimates", "diagnostics"] {
            fs::create_dir_all(run_dir(cfg, sub))?;
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config("experiment.workers", e.to_string()))?;
    for f in filters.iter().filter(|f| f.constraint.is_active() && f.constraint.reg_lambda > 0.0) {
        log::warn!(
            "{}: weight block regularized with lambda = {:e}",
            f.label,
            f.constraint.reg_lambda
        );
    }
    log::info!(
        "running {} realizations of {} filters, {} steps each",
        cfg.n_mc,
        filters.len(),
        cfg.truth.steps
    );
    let data: Vec<RunData> = pool.install(|| {
        (1..=cfg.n_mc)
            .into_par_iter()
            .map(|run| run_one(cfg, &filters, run, opts))
            .collect::<Result<_>>()
    })?;

    let grid = cdf_grid();
    let mut ensembles = vec![McEnsemble::default(); filters.len()];
    let mut failures = Vec::new();
    let mut seeds = Vec::with_capacity(data.len());
    let mut runs = Vec::new();
    for d in data {
        seeds.push(d.seed);
        failures.extend(d.failures);
        for (ens, est) in ensembles.iter_mut().zip(d.estimates) {
            if let Some((x, p)) = est {
                ens.push_run(d.states.clone(), x, p);
            }
        }
        if let Some(k) = d.kept {
            debug_assert_eq!(k.run, d.run);
            runs.push(k);
        }
    }
    let mut metrics = Vec::new();
    for (label, ens) in labels.iter().zip(&ensembles) {
        if let Some(m) = variant_metrics(label.clone(), ens, &grid)? {
            metrics.push(m);
        }
    }

    if opts.write {
        write_metrics(&cfg.out_dir, &metrics, &grid)?;
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            seeds: &seeds,
            labels: &labels,
            failures: &failures,
        };
        let mut f = create(&cfg.out_dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        writeln!(f)?;
        f.flush()?;
    }

    Ok(ExperimentResult {
        labels,
        metrics,
        failures,
        seeds,
        runs,
    })
}

/// Simulates one trajectory per run and writes only the truth CSVs.
pub fn simulate_only(cfg: &ExperimentConfig) -> Result<Vec<u64>> {
    cfg.truth.validate()?;
    let dir = run_dir(cfg, "trajectories");
    fs::create_dir_all(&dir)?;
    (1..=cfg.n_mc)
        .map(|run| {
            let truth = cfg.truth_for_run(run);
            let traj = simulate_truth(&truth).map_err(|e| Error::Step {
                step: run,
                source: Box::new(e),
            })?;
            traj.write_csv(create(&dir.join(format!("run_{run:04}.csv")))?)?;
            Ok(truth.seed)
        })
        .collect()
}
